#!/usr/bin/env python3
"""Recomputes `mmtok eval` metrics from the files alone (standard library only).

usage: recompute_metrics.py PRED_DIR TRUTH_DIR

Both directories are either single record directories or dataset roots with
a manifest.json. Prints the metrics as JSON.
"""

import cmath
import json
import os
import struct
import sys


def read_labels(path):
    with open(path, "rb") as f:
        data = f.read()
    l, h, w, _ = struct.unpack_from("<4I", data, 0)
    body = data[16:]
    assert len(body) == l * h * w
    return (l, h, w), body


def read_signal(path):
    with open(path, "rb") as f:
        data = f.read()
    _, _, n = struct.unpack_from("<IIQ", data, 0)
    return list(struct.unpack_from("<%dd" % n, data, 16))


def spectrum(x):
    n = len(x)
    return [abs(sum(v * cmath.exp(-2j * cmath.pi * (k * t % n) / n) for t, v in enumerate(x))) for k in range(n // 2 + 1)]


def pearson(a, b):
    n = min(len(a), len(b))
    if n == 0:
        return 0.0
    a, b = a[:n], b[:n]
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    if va == 0 or vb == 0:
        return 1.0 if va == vb and a == b else 0.0
    return cov / (va * vb) ** 0.5


def mean(xs):
    return {"value": sum(xs) / len(xs) if xs else None, "count": len(xs)}


def main(pred, truth):
    manifest = os.path.join(truth, "manifest.json")
    if os.path.exists(manifest):
        with open(manifest) as f:
            dirs = [r["dir"] for r in json.load(f)["records"]]
        pairs = [(os.path.join(pred, d), os.path.join(truth, d)) for d in dirs if os.path.isdir(os.path.join(pred, d))]
    else:
        pairs = [(pred, truth)]
    labels, scripts, attrs, spectra = [], [], [], []
    sq, values, anim_files = 0.0, 0, 0
    for p, t in pairs:
        for pre in ("", "past_"):
            f = lambda d, name: os.path.join(d, pre + name)
            if os.path.exists(f(p, "semantic.lbl")):
                (sa, a), (sb, b) = read_labels(f(p, "semantic.lbl")), read_labels(f(t, "semantic.lbl"))
                assert sa == sb
                labels.append(sum(x == y for x, y in zip(a, b)) / len(b))
            if os.path.exists(f(p, "animation.json")):
                with open(f(p, "animation.json")) as fp, open(f(t, "animation.json")) as ft:
                    ap, at = json.load(fp), json.load(ft)
                for key in ("shape", "expression", "pose"):
                    if key in ap and key in at:
                        sq += sum((x - y) ** 2 for x, y in zip(ap[key], at[key]))
                        values += len(at[key])
                anim_files += 1
            if os.path.exists(f(p, "script.txt")):
                with open(f(p, "script.txt"), "rb") as fp, open(f(t, "script.txt"), "rb") as ft:
                    scripts.append(1.0 if fp.read() == ft.read() else 0.0)
            if os.path.exists(f(p, "speech.sig")):
                a, b = read_signal(f(p, "speech.sig")), read_signal(f(t, "speech.sig"))
                n = min(len(a), len(b))
                spectra.append(pearson(spectrum(a[:n]), spectrum(b[:n])))
        if os.path.exists(os.path.join(p, "description.txt")):
            with open(os.path.join(p, "description.txt")) as fp, open(os.path.join(t, "description.txt")) as ft:
                pw, tw = fp.read().split(), ft.read().split()
            if tw:
                attrs.append(sum(1 for i, w in enumerate(tw) if i < len(pw) and pw[i] == w) / len(tw))
            else:
                attrs.append(1.0 if not pw else 0.0)
    report = {
        "label_accuracy": mean(labels),
        "animation_mse": {"value": sq / values if values else None, "count": anim_files},
        "script_exact_match": mean(scripts),
        "description_attribute_accuracy": mean(attrs),
        "speech_spectral_correlation": mean(spectra),
    }
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
