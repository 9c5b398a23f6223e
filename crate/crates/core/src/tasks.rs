//! Modality-set algebra, the 72-task registry, recurrent decomposition into
//! one-modality steps and the intermediate-modality chain planner.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::ModalityRef;
use crate::vocab::ModalityKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("task {0} has no inputs")]
    EmptyInputs(String),
    #[error("task {0} lists its output among its inputs or repeats an input")]
    InvalidSpec(String),
    #[error("duplicate task {0}")]
    DuplicateSpec(String),
    #[error("invalid modality reference {0}")]
    InvalidRef(String),
    #[error("targets must be distinct and disjoint from the conditions")]
    InvalidTargets,
    #[error("{target} is not reachable from {{{available}}}")]
    UnreachableModality { target: ModalityRef, available: String },
    #[error("no plan reaches {0}")]
    NoPlan(String),
}

const TEMPORAL: [ModalityKind; 5] = [
    ModalityKind::Script,
    ModalityKind::Speech,
    ModalityKind::Expression,
    ModalityKind::Pose,
    ModalityKind::Semantic,
];
const STATIC: [ModalityKind; 3] = [ModalityKind::Image, ModalityKind::Description, ModalityKind::Shape];

/// Every reference a prompt can carry: temporal kinds in past and current
/// state, static kinds invariant. 13 entries.
pub fn full_modality_set() -> Vec<ModalityRef> {
    let mut out = Vec::with_capacity(13);
    for k in TEMPORAL {
        out.push(ModalityRef::past(k));
        out.push(ModalityRef::current(k));
    }
    out.extend(STATIC.map(ModalityRef::invariant));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub inputs: Vec<ModalityRef>,
    pub output: ModalityRef,
}

impl TaskSpec {
    fn sorted_inputs(&self) -> Vec<ModalityRef> {
        let mut v = self.inputs.clone();
        v.sort();
        v
    }

    pub fn same_task(&self, other: &TaskSpec) -> bool {
        self.output == other.output && self.sorted_inputs() == other.sorted_inputs()
    }

    pub fn matches(&self, available: &[ModalityRef], output: ModalityRef) -> bool {
        self.output == output && self.inputs.iter().all(|i| available.contains(i))
    }
}

/// `[speech(c), image(t)] -> semantic(c)`
impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, r) in self.inputs.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{r}")?;
        }
        write!(f, "] -> {}", self.output)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TaskSpec>", into = "Vec<TaskSpec>")]
pub struct Registry {
    specs: Vec<TaskSpec>,
    by_output: BTreeMap<ModalityRef, Vec<usize>>,
}

impl TryFrom<Vec<TaskSpec>> for Registry {
    type Error = TaskError;

    fn try_from(specs: Vec<TaskSpec>) -> Result<Self, TaskError> {
        Registry::new(specs)
    }
}

impl From<Registry> for Vec<TaskSpec> {
    fn from(r: Registry) -> Self {
        r.specs
    }
}

impl Registry {
    pub fn new(specs: Vec<TaskSpec>) -> Result<Self, TaskError> {
        let mut by_output: BTreeMap<ModalityRef, Vec<usize>> = BTreeMap::new();
        for (i, s) in specs.iter().enumerate() {
            if s.inputs.is_empty() {
                return Err(TaskError::EmptyInputs(format!("{s}")));
            }
            if !s.output.is_valid() {
                return Err(TaskError::InvalidRef(format!("{}", s.output)));
            }
            if let Some(bad) = s.inputs.iter().find(|r| !r.is_valid()) {
                return Err(TaskError::InvalidRef(format!("{bad}")));
            }
            let mut sorted = s.sorted_inputs();
            sorted.dedup();
            if sorted.len() != s.inputs.len() || s.inputs.contains(&s.output) {
                return Err(TaskError::InvalidSpec(format!("{s}")));
            }
            if specs[..i].iter().any(|o| o.same_task(s)) {
                return Err(TaskError::DuplicateSpec(format!("{s}")));
            }
            by_output.entry(s.output).or_default().push(i);
        }
        Ok(Self { specs, by_output })
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn by_output(&self, output: ModalityRef) -> &[usize] {
        self.by_output.get(&output).map_or(&[], Vec::as_slice)
    }

    /// Number of tasks sharing spec `i`'s output modality.
    pub fn output_count(&self, i: usize) -> usize {
        self.by_output(self.specs[i].output).len()
    }

    pub fn find(&self, spec: &TaskSpec) -> Option<usize> {
        self.specs.iter().position(|s| s.same_task(spec))
    }

    /// Spec producing `output` whose inputs are all available, preferring
    /// the one that uses the most of them, then the lowest index.
    pub fn matching(&self, available: &[ModalityRef], output: ModalityRef) -> Option<usize> {
        let mut best: Option<usize> = None;
        for &i in self.by_output(output) {
            if self.specs[i].matches(available, output)
                && best.is_none_or(|b| self.specs[i].inputs.len() > self.specs[b].inputs.len())
            {
                best = Some(i);
            }
        }
        best
    }
}

// Rows of the training-task table, one string per output modality. `id` is
// the shape (identity) component. `expr (t)` / `pose (t)` in the image row
// are read as current-state animation since those kinds have no invariant
// state.
const TABLE: &[(&str, &[&str])] = &[
    (
        "script(c)",
        &["desc(t)", "script(p)", "speech(c)", "expr(c)", "semantic(c)"],
    ),
    (
        "speech(c)",
        &[
            "desc(t)",
            "desc(t) script(c)",
            "script(c)",
            "script(c) speech(p)",
            "speech(p)",
            "script(c) image(t)",
            "script(c) semantic(c)",
            "script(c) speech(p) semantic(c)",
            "id(t) expr(c)",
            "semantic(c)",
            "script(c) id(t)",
        ],
    ),
    (
        "image(t)",
        &[
            "desc(t)",
            "speech(c)",
            "id(t)",
            "id(t) expr(c) pose(c)",
            "desc(t) id(t) expr(c) pose(c)",
        ],
    ),
    ("id(t)", &["desc(t)", "desc(t) script(c) speech(c)", "speech(c)", "image(t)"]),
    (
        "expr(c)",
        &[
            "desc(t)",
            "desc(t) script(c) speech(c) image(t) id(t)",
            "script(c)",
            "script(c) speech(c) id(t)",
            "speech(c)",
            "speech(c) id(t)",
            "speech(c) id(t) image(t)",
            "speech(c) image(t)",
            "semantic(c)",
            "expr(p) speech(c)",
        ],
    ),
    (
        "pose(c)",
        &[
            "desc(t)",
            "speech(c)",
            "speech(c) id(t) expr(c)",
            "speech(c) expr(c) image(t)",
            "speech(c) id(t) expr(c) image(t)",
            "image(t) id(t) expr(c)",
            "image(t) expr(c)",
            "id(t) expr(c)",
            "semantic(c)",
        ],
    ),
    (
        "semantic(c)",
        &[
            "desc(t)",
            "desc(t) script(c)",
            "desc(t) script(c) speech(c)",
            "desc(t) script(c) speech(c) id(t) expr(c) pose(c)",
            "desc(t) image(t)",
            "desc(t) script(c) speech(c) id(t) expr(c) pose(c) image(t)",
            "script(c)",
            "script(c) image(t)",
            "script(c) speech(c) id(t) expr(c) pose(c) image(t)",
            "speech(c)",
            "speech(c) id(t) expr(c) pose(c)",
            "speech(c) id(t) expr(c) pose(c) image(t)",
            "speech(c) image(t)",
            "speech(c) expr(c) pose(c) image(t)",
            "image(t)",
            "image(t) id(t) expr(c) pose(c)",
            "image(t) expr(c) pose(c)",
            "image(t) expr(c)",
            "id(t) expr(c) pose(c)",
            "semantic(p)",
            "semantic(p) speech(c)",
            "semantic(p) expr(c) pose(c)",
        ],
    ),
    (
        "desc(t)",
        &[
            "speech(c)",
            "image(t) semantic(c) speech(c)",
            "image(t) semantic(c) speech(c) script(c)",
            "image(t)",
            "image(t) semantic(c)",
            "id(t) expr(c) pose(c)",
        ],
    ),
];

fn table_ref(s: &str) -> ModalityRef {
    let expanded = s
        .replace("desc(", "description(")
        .replace("expr(", "expression(")
        .replace("id(", "shape(");
    expanded.parse().expect("table entries are valid references")
}

/// The 72 training tasks in table order.
pub fn registry_default() -> Registry {
    let specs = TABLE
        .iter()
        .flat_map(|(out, rows)| {
            let output = table_ref(out);
            rows.iter().map(move |row| TaskSpec {
                inputs: row.split(' ').map(table_ref).collect(),
                output,
            })
        })
        .collect();
    Registry::new(specs).expect("default table is well formed")
}

/// True iff some registered task for `output` needs only modalities in
/// `available`.
pub fn executable(registry: &Registry, available: &[ModalityRef], output: ModalityRef) -> bool {
    registry.matching(available, output).is_some()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub available: Vec<ModalityRef>,
    pub target: ModalityRef,
    /// Registry row that licenses the step.
    pub spec: usize,
}

fn join(refs: &[ModalityRef]) -> String {
    let parts: Vec<String> = refs.iter().map(|r| format!("{r}")).collect();
    parts.join(", ")
}

/// Splits generation of `targets` into one step per target, each
/// conditioned on the conditions plus every earlier target.
pub fn decompose(registry: &Registry, conditions: &[ModalityRef], targets: &[ModalityRef]) -> Result<Vec<Step>, TaskError> {
    for (i, t) in targets.iter().enumerate() {
        if conditions.contains(t) || targets[..i].contains(t) {
            return Err(TaskError::InvalidTargets);
        }
    }
    let mut available = conditions.to_vec();
    let mut steps = Vec::with_capacity(targets.len());
    for &t in targets {
        let Some(spec) = registry.matching(&available, t) else {
            return Err(TaskError::UnreachableModality {
                target: t,
                available: join(&available),
            });
        };
        steps.push(Step {
            available: available.clone(),
            target: t,
            spec,
        });
        available.push(t);
    }
    Ok(steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Insert executable intermediate modalities before the target.
    Canonical,
    /// Generate the target in one step.
    Direct,
}

/// A chain can end in a token modality or in a rendered video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Modality(ModalityRef),
    Video,
}

impl core::str::FromStr for Target {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, TaskError> {
        if s.trim() == "video" {
            return Ok(Target::Video);
        }
        s.parse()
            .map(Target::Modality)
            .map_err(|_| TaskError::InvalidRef(String::from(s)))
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Modality(r) => write!(f, "{r}"),
            Target::Video => f.write_str("video"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainPlan {
    pub conditions: Vec<ModalityRef>,
    /// Generation order. For a modality target the last step is the target.
    pub steps: Vec<ModalityRef>,
    pub target: Target,
}

impl ChainPlan {
    /// Whether the chain finishes by rendering the semantic video.
    pub fn renders(&self) -> bool {
        self.target == Target::Video
    }
}

/// `[shape(t), expression(c)] -> semantic(c)` or `[...] + render`.
impl fmt::Display for ChainPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}} => [{}]", join(&self.conditions), join(&self.steps))?;
        if self.renders() {
            f.write_str(" + render")?;
        }
        Ok(())
    }
}

/// Intermediate modalities in the order a chain tries them.
pub fn canonical_intermediates() -> [ModalityRef; 4] {
    [
        ModalityRef::invariant(ModalityKind::Shape),
        ModalityRef::current(ModalityKind::Expression),
        ModalityRef::current(ModalityKind::Semantic),
        ModalityRef::invariant(ModalityKind::Description),
    ]
}

/// Plans the generation order for `target`. Canonical plans insert each
/// intermediate that precedes the target in canonical order, is not already
/// a condition and is executable at that point. A video target needs a
/// semantic video, generated or given, and ends with a render.
pub fn plan_chain(
    registry: &Registry,
    conditions: &[ModalityRef],
    target: Target,
    strategy: Strategy,
) -> Result<ChainPlan, TaskError> {
    let semantic = ModalityRef::current(ModalityKind::Semantic);
    let no_plan = || TaskError::NoPlan(format!("{target} from {{{}}}", join(conditions)));
    if let Target::Modality(t) = target {
        if conditions.contains(&t) {
            return Err(TaskError::InvalidTargets);
        }
    }
    let mut steps: Vec<ModalityRef> = Vec::new();
    match strategy {
        Strategy::Direct => match target {
            Target::Modality(t) => steps.push(t),
            Target::Video if conditions.contains(&semantic) => {}
            Target::Video => steps.push(semantic),
        },
        Strategy::Canonical => {
            let order = canonical_intermediates();
            let cut = match target {
                Target::Modality(t) => order.iter().position(|&r| r == t).unwrap_or(order.len()),
                Target::Video => order.len(),
            };
            let mut available = conditions.to_vec();
            for &r in &order[..cut] {
                if !available.contains(&r) && executable(registry, &available, r) {
                    steps.push(r);
                    available.push(r);
                }
            }
            if let Target::Modality(t) = target {
                steps.push(t);
            }
        }
    }
    if target == Target::Video && !conditions.contains(&semantic) && !steps.contains(&semantic) {
        return Err(no_plan());
    }
    decompose(registry, conditions, &steps).map_err(|_| no_plan())?;
    Ok(ChainPlan {
        conditions: conditions.to_vec(),
        steps,
        target,
    })
}
