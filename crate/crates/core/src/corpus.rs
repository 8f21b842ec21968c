//! Synthetic student corpora: bundled tasks, scripted rubrics, the
//! mutation-chain submission generator, and composition corpora.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use thiserror::Error;

use crate::dsl::{canonical_id, modeling_tree, parse, pretty, Ast, CanonicalId, NodeKind, ATOMS};
use crate::gridworld::{parse_worlds, WorldSpec, WorldState};
use crate::interpreter::{run, run_all, run_unit_tests, ExecutionTrace, HaltReason, UnitTest, DEFAULT_STEP_LIMIT};
use crate::numcore::{rng, Rng};

/// Label names a submission carries.
pub type AnnotationSet = BTreeSet<String>;

pub const CORRECT: &str = "correct";
pub const INCORRECT: &str = "incorrect";

/// Frequency skew of generated corpora.
pub const ZIPF_EXPONENT: f64 = 1.5;

/// Success probability of the geometric chain length (mean 3).
const CHAIN_P: f64 = 1.0 / 3.0;

/// Generated programs larger than this are rejected.
const MAX_STATEMENTS: usize = 60;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("only {found} distinct programs reachable, {wanted} requested")]
    Exhausted { found: usize, wanted: usize },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("corpus file line {line}: {msg}")]
    Format { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Functional,
    Strategic,
    Stylistic,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Functional, Category::Strategic, Category::Stylistic];
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Functional => "functional",
            Category::Strategic => "strategic",
            Category::Stylistic => "stylistic",
        })
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "functional" => Ok(Category::Functional),
            "strategic" => Ok(Category::Strategic),
            "stylistic" => Ok(Category::Stylistic),
            _ => Err(format!("unknown category {s:?}")),
        }
    }
}

/// Everything a rubric predicate may look at.
pub struct ProgramFacts<'a> {
    pub surface: &'a Ast,
    pub modeling: Ast,
    pub pass_fraction: f64,
    pub traces: Vec<ExecutionTrace>,
    pub tests: &'a [UnitTest],
}

impl ProgramFacts<'_> {
    pub fn new<'a>(surface: &'a Ast, tests: &'a [UnitTest]) -> ProgramFacts<'a> {
        let modeling = modeling_tree(surface);
        ProgramFacts {
            pass_fraction: run_unit_tests(&modeling, tests),
            traces: run_all(&modeling, tests, DEFAULT_STEP_LIMIT),
            modeling,
            surface,
            tests,
        }
    }

    fn any_halt(&self, reason: HaltReason) -> bool {
        self.traces.iter().any(|t| t.halted == reason)
    }

    fn finals(&self) -> impl Iterator<Item = (&ExecutionTrace, &UnitTest)> {
        self.traces.iter().zip(self.tests)
    }
}

#[derive(Clone)]
pub struct RubricRule {
    pub label: &'static str,
    pub category: Category,
    pub description: &'static str,
    pub predicate: fn(&ProgramFacts) -> bool,
}

impl fmt::Debug for RubricRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RubricRule({}, {})", self.label, self.category)
    }
}

#[derive(Clone, Debug)]
pub struct Task {
    pub name: String,
    pub tests: Vec<UnitTest>,
    pub reference_solutions: Vec<Ast>,
    pub rubric: Vec<RubricRule>,
}

impl Task {
    /// (spec, start) pairs used for triple extraction.
    pub fn worlds(&self) -> Vec<(WorldSpec, WorldState)> {
        self.tests
            .iter()
            .map(|t| (t.spec.clone(), t.start.clone()))
            .collect()
    }

    pub fn label_names(&self) -> Vec<String> {
        self.rubric.iter().map(|r| r.label.to_string()).collect()
    }

    pub fn rule(&self, label: &str) -> Option<&RubricRule> {
        self.rubric.iter().find(|r| r.label == label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Submission {
    pub program: Ast,
    pub id: CanonicalId,
    pub frequency: u64,
    pub labels: AnnotationSet,
}

pub const TASK_NAMES: [&str; 3] = ["maze", "fetch", "midpoint"];

pub fn bundled_task(name: &str) -> Result<Task, CorpusError> {
    match name {
        "maze" => Ok(maze_task()),
        "fetch" => Ok(fetch_task()),
        "midpoint" => Ok(midpoint_task()),
        other => Err(CorpusError::UnknownTask(other.to_string())),
    }
}

fn build_task(name: &str, worlds: &str, refs: &[&str], rubric: Vec<RubricRule>) -> Task {
    let worlds = parse_worlds(worlds).expect("bundled worlds parse");
    let refs: Vec<Ast> = refs.iter().map(|s| parse(s).expect("bundled reference parses")).collect();
    let primary = modeling_tree(&refs[0]);
    let tests = worlds
        .into_iter()
        .map(|(spec, start)| {
            let expected = run(&primary, &spec, &start, DEFAULT_STEP_LIMIT).final_state;
            UnitTest { spec, start, expected }
        })
        .collect();
    Task {
        name: name.to_string(),
        tests,
        reference_solutions: refs,
        rubric,
    }
}

// ---- shared predicates -------------------------------------------------

fn is_correct(f: &ProgramFacts) -> bool {
    f.pass_fraction == 1.0
}

fn is_incorrect(f: &ProgramFacts) -> bool {
    f.pass_fraction < 1.0
}

fn crashes(f: &ProgramFacts) -> bool {
    f.any_halt(HaltReason::Crashed)
}

fn runs_forever(f: &ProgramFacts) -> bool {
    f.any_halt(HaltReason::StepLimit)
}

fn partially_passes(f: &ProgramFacts) -> bool {
    f.pass_fraction > 0.0 && f.pass_fraction < 1.0
}

fn has(ast: &Ast, kind: NodeKind) -> bool {
    ast.contains_kind(|k| *k == kind)
}

fn has_conditional(ast: &Ast) -> bool {
    ast.contains_kind(|k| matches!(k, NodeKind::If | NodeKind::IfElse))
}

fn has_loop(ast: &Ast) -> bool {
    ast.contains_kind(|k| matches!(k, NodeKind::While | NodeKind::Repeat))
}

/// Some node matching `inner` has an ancestor matching `outer`.
fn nested(ast: &Ast, outer: fn(&NodeKind) -> bool, inner: fn(&NodeKind) -> bool) -> bool {
    fn go(ast: &Ast, inside: bool, outer: fn(&NodeKind) -> bool, inner: fn(&NodeKind) -> bool) -> bool {
        if inside && inner(&ast.kind) {
            return true;
        }
        let now = inside || outer(&ast.kind);
        ast.children.iter().any(|c| go(c, now, outer, inner))
    }
    go(ast, false, outer, inner)
}

/// Some node matching `inner` has no ancestor matching `outer`.
fn outside(ast: &Ast, outer: fn(&NodeKind) -> bool, inner: fn(&NodeKind) -> bool) -> bool {
    fn go(ast: &Ast, inside: bool, outer: fn(&NodeKind) -> bool, inner: fn(&NodeKind) -> bool) -> bool {
        if !inside && inner(&ast.kind) {
            return true;
        }
        let now = inside || outer(&ast.kind);
        ast.children.iter().any(|c| go(c, now, outer, inner))
    }
    go(ast, false, outer, inner)
}

fn any_seq(ast: &Ast, pred: &dyn Fn(&[Ast]) -> bool) -> bool {
    let mut found = false;
    ast.walk(&mut |n| {
        if n.kind == NodeKind::Seq && pred(&n.children) {
            found = true;
        }
    });
    found
}

fn run_of(ast: &Ast, kind: NodeKind, len: usize) -> bool {
    any_seq(ast, &|kids| {
        kids.windows(len)
            .any(|w| w.iter().all(|c| c.kind == kind))
    })
}

fn opposite_turns(ast: &Ast) -> bool {
    any_seq(ast, &|kids| {
        kids.windows(2).any(|w| {
            matches!(
                (&w[0].kind, &w[1].kind),
                (NodeKind::TurnLeft, NodeKind::TurnRight) | (NodeKind::TurnRight, NodeKind::TurnLeft)
            )
        })
    })
}

fn redundant_turns(f: &ProgramFacts) -> bool {
    opposite_turns(f.surface)
        || run_of(f.surface, NodeKind::TurnLeft, 4)
        || run_of(f.surface, NodeKind::TurnRight, 2)
}

fn has_empty_block(f: &ProgramFacts) -> bool {
    has(f.surface, NodeKind::Empty)
}

fn uses_repeat(f: &ProgramFacts) -> bool {
    has(&f.modeling, NodeKind::Repeat)
}

/// The program without its method definitions.
fn main_body(ast: &Ast) -> Ast {
    let items = top_level(ast)
        .into_iter()
        .filter(|n| !matches!(n.kind, NodeKind::Def(_)))
        .cloned()
        .collect();
    Ast::seq(items)
}

fn top_level(ast: &Ast) -> Vec<&Ast> {
    match ast.kind {
        NodeKind::Seq => ast.children.iter().collect(),
        _ => vec![ast],
    }
}

// ---- maze (while + if/else navigation, no beepers) ---------------------

const MAZE_WORLDS: &str = "\
5 5 0
####.
####.
####.
####.
.....
agent 4 0 E

5 5 0
.....
####.
####.
####.
####.
agent 0 0 E

5 5 0
##...
##.##
...##
.####
.####
agent 4 0 N

5 5 0
#####
#####
...##
#####
#####
agent 2 2 W

5 5 0
#####
#####
...##
##.##
...##
agent 4 0 E
";

const MAZE_REFS: [&str; 2] = [
    "while(front_is_clear){\n  move\n  if(left_is_clear){\n    turn_left\n  } else {\n    if(right_is_clear){\n      turn_right\n    }\n  }\n}",
    "while(front_is_clear){\n  move\n  if(right_is_clear){\n    turn_right\n  } else {\n    if(left_is_clear){\n      turn_left\n    }\n  }\n}",
];

fn maze_task() -> Task {
    let rubric = vec![
        RubricRule { label: CORRECT, category: Category::Functional, description: "passes every unit test", predicate: is_correct },
        RubricRule { label: INCORRECT, category: Category::Functional, description: "fails at least one unit test", predicate: is_incorrect },
        RubricRule { label: "crashes", category: Category::Functional, description: "runs into a wall on some maze", predicate: crashes },
        RubricRule { label: "infinite-loop", category: Category::Functional, description: "never terminates on some maze", predicate: runs_forever },
        RubricRule { label: "partial", category: Category::Functional, description: "solves some mazes but not all", predicate: partially_passes },
        RubricRule { label: "missing-while", category: Category::Strategic, description: "no while loop", predicate: |f| !has(&f.modeling, NodeKind::While) },
        RubricRule { label: "missing-conditional", category: Category::Strategic, description: "never tests the surroundings with if", predicate: |f| !has_conditional(&f.modeling) },
        RubricRule { label: "ignores-right", category: Category::Strategic, description: "never checks the right-hand side", predicate: |f| !has(&f.modeling, NodeKind::RightClear) },
        RubricRule { label: "conditional-outside-loop", category: Category::Strategic, description: "an if sits outside every loop", predicate: |f| outside(&f.modeling, |k| matches!(k, NodeKind::While | NodeKind::Repeat), |k| matches!(k, NodeKind::If | NodeKind::IfElse)) },
        RubricRule { label: "hardcoded-repeat", category: Category::Strategic, description: "uses a fixed repeat count", predicate: uses_repeat },
        RubricRule { label: "redundant-turns", category: Category::Stylistic, description: "turns that cancel or wrap around", predicate: redundant_turns },
        RubricRule { label: "code-after-loop", category: Category::Stylistic, description: "statements after the main loop", predicate: |f| {
            let items = top_level(f.surface);
            items.iter().position(|n| n.kind == NodeKind::While).is_some_and(|i| i + 1 < items.len())
        } },
        RubricRule { label: "empty-block", category: Category::Stylistic, description: "an empty block", predicate: has_empty_block },
        RubricRule { label: "long-program", category: Category::Stylistic, description: "far longer than needed", predicate: |f| f.surface.statement_count() > 12 },
    ];
    build_task("maze", MAZE_WORLDS, &MAZE_REFS, rubric)
}

// ---- fetch (collect a beeper in a fixed world and come back) -----------

const FETCH_WORLD: &str = "\
4 6 1
......
##....
....1.
......
agent 0 0 E
";

const TURN_AROUND_DEF: &str = "def turn_around {\n  turn_left\n  turn_left\n}\n";

/// Correct fetch solutions in the usual range of styles, primary first.
fn fetch_references() -> Vec<String> {
    let rights = ["turn_right", "turn_left turn_left turn_left", "repeat(3){ turn_left }"];
    let arounds = ["turn_around()", "turn_left turn_left", "repeat(2){ turn_left }", "turn_right turn_right"];
    let pairs = ["move move", "repeat(2){ move }"];
    let mut out = Vec::new();
    for with_method in [true, false] {
        for pair in pairs {
            for right in rights {
                for around in arounds {
                    let walk = format!("{pair} {right} {pair} turn_left {pair}");
                    let mut src = String::new();
                    if around == "turn_around()" {
                        src.push_str(TURN_AROUND_DEF);
                    }
                    let walk_call = if with_method {
                        src.push_str(&format!("def walk {{ {walk} }}\n"));
                        "walk()".to_string()
                    } else {
                        walk
                    };
                    src.push_str(&format!("{walk_call} pick_beeper {around} {walk_call} {around}"));
                    out.push(src);
                }
            }
        }
    }
    out
}

fn fetch_task() -> Task {
    let rubric = vec![
        RubricRule { label: CORRECT, category: Category::Functional, description: "fetches the beeper and returns", predicate: is_correct },
        RubricRule { label: INCORRECT, category: Category::Functional, description: "wrong final state", predicate: is_incorrect },
        RubricRule { label: "crashes", category: Category::Functional, description: "hits a wall or picks from an empty cell", predicate: crashes },
        RubricRule { label: "collects-beeper", category: Category::Functional, description: "the beeper ends up picked", predicate: |f| {
            f.finals().all(|(t, u)| t.final_state.beepers.iter().map(|&b| u32::from(b)).sum::<u32>() < u.start.beepers.iter().map(|&b| u32::from(b)).sum::<u32>())
        } },
        RubricRule { label: "returns-home", category: Category::Functional, description: "ends on the starting cell", predicate: |f| {
            f.finals().all(|(t, u)| !t.final_state.crashed && (t.final_state.row, t.final_state.col) == (u.start.row, u.start.col))
        } },
        RubricRule { label: "uses-methods", category: Category::Strategic, description: "decomposes into methods", predicate: |f| f.surface.contains_kind(|k| matches!(k, NodeKind::Def(_))) },
        RubricRule { label: "uses-loop", category: Category::Strategic, description: "uses repeat or while", predicate: |f| has_loop(&f.modeling) },
        RubricRule { label: "no-pick", category: Category::Strategic, description: "never picks a beeper", predicate: |f| !has(&f.modeling, NodeKind::PickBeeper) },
        RubricRule { label: "three-lefts", category: Category::Stylistic, description: "three left turns instead of a right turn", predicate: |f| run_of(f.surface, NodeKind::TurnLeft, 3) },
        RubricRule { label: "redundant-turns", category: Category::Stylistic, description: "turns that cancel or wrap around", predicate: redundant_turns },
        RubricRule { label: "long-straight-line", category: Category::Stylistic, description: "long runs of moves that could loop", predicate: |f| run_of(f.surface, NodeKind::Move, 3) },
        RubricRule { label: "empty-block", category: Category::Stylistic, description: "an empty block", predicate: has_empty_block },
    ];
    let refs = fetch_references();
    let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
    build_task("fetch", FETCH_WORLD, &refs, rubric)
}

// ---- midpoint (mark the middle of a row of unknown width) --------------

/// Correct midpoint solutions differing in how they turn around.
fn midpoint_references() -> Vec<String> {
    let arounds = [
        (TURN_AROUND_DEF, "turn_around()"),
        ("", "turn_left turn_left"),
        ("", "repeat(2){ turn_left }"),
        ("", "turn_right turn_right"),
        ("def turn_around { repeat(2){ turn_left } }\n", "turn_around()"),
    ];
    arounds
        .iter()
        .map(|(def, a)| {
            format!(
                "{def}move\nwhile(front_is_clear){{ put_beeper move }}\n{a}\nmove\n\
                 while(beepers_present){{ pick_beeper move while(beepers_present){{ move }} {a} move }}\nput_beeper"
            )
        })
        .collect()
}

fn midpoint_worlds() -> String {
    (2..=8)
        .map(|width| {
            let row: String = (0..8).map(|c| if c < width { '.' } else { '#' }).collect();
            format!("1 8 1\n{row}\nagent 0 0 E\n")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn midpoint_task() -> Task {
    let rubric = vec![
        RubricRule { label: CORRECT, category: Category::Functional, description: "marks the midpoint in every world", predicate: is_correct },
        RubricRule { label: INCORRECT, category: Category::Functional, description: "wrong result in some world", predicate: is_incorrect },
        RubricRule { label: "crashes", category: Category::Functional, description: "hits a wall or picks from an empty cell", predicate: crashes },
        RubricRule { label: "infinite-loop", category: Category::Functional, description: "never terminates in some world", predicate: runs_forever },
        RubricRule { label: "extra-beepers", category: Category::Functional, description: "leaves more than one beeper", predicate: |f| {
            f.traces.iter().any(|t| t.final_state.beepers.iter().filter(|&&b| b > 0).count() > 1)
        } },
        RubricRule { label: "no-beeper", category: Category::Functional, description: "finishes without marking any cell", predicate: |f| {
            f.traces.iter().any(|t| t.halted == HaltReason::Finished && t.final_state.beepers.iter().all(|&b| b == 0))
        } },
        RubricRule { label: "fills-row", category: Category::Strategic, description: "lays beepers along the row in a loop", predicate: |f| {
            nested(&f.modeling, |k| *k == NodeKind::While, |k| *k == NodeKind::PutBeeper)
        } },
        RubricRule { label: "nested-loop", category: Category::Strategic, description: "a loop inside a loop", predicate: |f| {
            nested(&f.modeling, |k| matches!(k, NodeKind::While | NodeKind::Repeat), |k| matches!(k, NodeKind::While | NodeKind::Repeat))
        } },
        RubricRule { label: "missing-pick", category: Category::Strategic, description: "never removes beepers", predicate: |f| !has(&f.modeling, NodeKind::PickBeeper) },
        RubricRule { label: "hardcoded-repeat", category: Category::Strategic, description: "uses a fixed repeat count", predicate: uses_repeat },
        RubricRule { label: "inline-turn-around", category: Category::Stylistic, description: "spells out a turn-around instead of calling a method", predicate: |f| run_of(&main_body(f.surface), NodeKind::TurnLeft, 2) },
        RubricRule { label: "redundant-turns", category: Category::Stylistic, description: "turns that cancel or wrap around", predicate: redundant_turns },
        RubricRule { label: "no-methods", category: Category::Stylistic, description: "no method decomposition", predicate: |f| !f.surface.contains_kind(|k| matches!(k, NodeKind::Def(_))) },
        RubricRule { label: "long-program", category: Category::Stylistic, description: "far longer than needed", predicate: |f| f.surface.statement_count() > 22 },
    ];
    let refs = midpoint_references();
    let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
    build_task("midpoint", &midpoint_worlds(), &refs, rubric)
}

// ---- annotation ---------------------------------------------------------

/// Labels whose rubric predicates hold. Exactly one of `correct` /
/// `incorrect` is always present.
pub fn annotate(program: &Ast, task: &Task) -> AnnotationSet {
    let facts = ProgramFacts::new(program, &task.tests);
    task.rubric
        .iter()
        .filter(|r| (r.predicate)(&facts))
        .map(|r| r.label.to_string())
        .collect()
}

// ---- mutation -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    Delete,
    Duplicate,
    SwapAdjacent,
    ReplacePrimitive,
    ChangeCount,
    FlipCondition,
    WrapInLoop,
    UnwrapLoop,
    TruncatePrefix,
}

impl Mutation {
    pub const ALL: [Mutation; 9] = [
        Mutation::Delete,
        Mutation::Duplicate,
        Mutation::SwapAdjacent,
        Mutation::ReplacePrimitive,
        Mutation::ChangeCount,
        Mutation::FlipCondition,
        Mutation::WrapInLoop,
        Mutation::UnwrapLoop,
        Mutation::TruncatePrefix,
    ];

    fn weight(self) -> u32 {
        match self {
            Mutation::Delete => 4,
            Mutation::Duplicate => 3,
            Mutation::SwapAdjacent => 3,
            Mutation::ReplacePrimitive => 4,
            Mutation::ChangeCount => 2,
            Mutation::FlipCondition => 3,
            Mutation::WrapInLoop => 2,
            Mutation::UnwrapLoop => 2,
            Mutation::TruncatePrefix => 2,
        }
    }
}

fn pick_mutation(r: &mut Rng) -> Mutation {
    let total: u32 = Mutation::ALL.iter().map(|m| m.weight()).sum();
    let mut x = r.gen_range(0..total);
    for m in Mutation::ALL {
        if x < m.weight() {
            return m;
        }
        x -= m.weight();
    }
    unreachable!()
}

type Path = Vec<usize>;

fn paths(ast: &Ast, pred: &dyn Fn(&Ast, Option<&Ast>) -> bool) -> Vec<Path> {
    fn go(ast: &Ast, parent: Option<&Ast>, path: &mut Path, pred: &dyn Fn(&Ast, Option<&Ast>) -> bool, out: &mut Vec<Path>) {
        if pred(ast, parent) {
            out.push(path.clone());
        }
        for (i, c) in ast.children.iter().enumerate() {
            path.push(i);
            go(c, Some(ast), path, pred, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    go(ast, None, &mut Vec::new(), pred, &mut out);
    out
}

fn node_mut<'a>(ast: &'a mut Ast, path: &[usize]) -> &'a mut Ast {
    path.iter().fold(ast, |n, &i| &mut n.children[i])
}

fn in_sequence(node: &Ast, parent: Option<&Ast>) -> bool {
    parent.is_some_and(|p| p.kind == NodeKind::Seq) && !matches!(node.kind, NodeKind::Def(_))
}

fn random_atom(r: &mut Rng) -> Ast {
    Ast::leaf(ATOMS[r.gen_range(0..ATOMS.len())].clone())
}

fn random_primitive(r: &mut Rng, beepers: bool, exclude: &NodeKind) -> Ast {
    let mut options = vec![NodeKind::Move, NodeKind::TurnLeft, NodeKind::TurnRight];
    if beepers {
        options.extend([NodeKind::PutBeeper, NodeKind::PickBeeper]);
    }
    options.retain(|k| k != exclude);
    Ast::leaf(options[r.gen_range(0..options.len())].clone())
}

/// Applies one mutation in place. Returns false when the operator has no
/// applicable site.
fn mutate(ast: &mut Ast, op: Mutation, beepers: bool, r: &mut Rng) -> bool {
    // Work on a sequence root so top-level statements are editable.
    if ast.kind != NodeKind::Seq {
        *ast = Ast::seq(vec![ast.clone()]);
    }
    let choose = |ps: Vec<Path>, r: &mut Rng| -> Option<Path> { ps.choose(r).cloned() };
    match op {
        Mutation::Delete | Mutation::Duplicate => {
            let Some(p) = choose(paths(ast, &in_sequence), r) else { return false };
            let (last, parent) = p.split_last().unwrap();
            let seq = node_mut(ast, parent);
            if op == Mutation::Delete {
                seq.children.remove(*last);
                if seq.children.is_empty() {
                    *seq = Ast::empty();
                }
            } else {
                let copy = seq.children[*last].clone();
                seq.children.insert(*last + 1, copy);
            }
        }
        Mutation::SwapAdjacent => {
            let sites = paths(ast, &|n, p| in_sequence(n, p) && p.is_some_and(|p| p.children.len() > 1));
            let Some(p) = choose(sites, r) else { return false };
            let (last, parent) = p.split_last().unwrap();
            let seq = node_mut(ast, parent);
            let j = if *last + 1 < seq.children.len() { *last + 1 } else { *last - 1 };
            seq.children.swap(*last, j);
        }
        Mutation::ReplacePrimitive => {
            let Some(p) = choose(paths(ast, &|n, _| n.kind.is_primitive()), r) else { return false };
            let node = node_mut(ast, &p);
            *node = random_primitive(r, beepers, &node.kind);
        }
        Mutation::ChangeCount => {
            let Some(p) = choose(paths(ast, &|n, _| matches!(n.kind, NodeKind::Num(_))), r) else { return false };
            let node = node_mut(ast, &p);
            let NodeKind::Num(old) = node.kind else { unreachable!() };
            let mut k = old;
            while k == old {
                k = r.gen_range(1..=10);
            }
            node.kind = NodeKind::Num(k);
        }
        Mutation::FlipCondition => {
            let sites = paths(ast, &|n, p| {
                n.kind.is_condition() && !p.is_some_and(|p| p.kind == NodeKind::Not)
            });
            let Some(p) = choose(sites, r) else { return false };
            let node = node_mut(ast, &p);
            *node = if r.gen_bool(0.5) {
                match node.kind {
                    NodeKind::Not => node.children[0].clone(),
                    _ => Ast::not(node.clone()),
                }
            } else {
                let mut atom = random_atom(r);
                while node.kind == atom.kind || node.children.first().is_some_and(|c| c.kind == atom.kind) {
                    atom = random_atom(r);
                }
                if node.kind == NodeKind::Not {
                    Ast::not(atom)
                } else {
                    atom
                }
            };
        }
        Mutation::WrapInLoop => {
            let Some(p) = choose(paths(ast, &in_sequence), r) else { return false };
            let node = node_mut(ast, &p);
            let body = Ast::seq(vec![node.clone()]);
            *node = if r.gen_bool(0.5) {
                Ast::repeat(r.gen_range(2..=4), body)
            } else {
                let c = random_atom(r);
                Ast::while_loop(if r.gen_bool(0.3) { Ast::not(c) } else { c }, body)
            };
        }
        Mutation::UnwrapLoop => {
            let sites = paths(ast, &|n, p| {
                in_sequence(n, p)
                    && matches!(n.kind, NodeKind::Repeat | NodeKind::While | NodeKind::If | NodeKind::IfElse)
            });
            let Some(p) = choose(sites, r) else { return false };
            let (last, parent) = p.split_last().unwrap();
            let seq = node_mut(ast, parent);
            let body = seq.children[*last].children[1].clone();
            let spliced: Vec<Ast> = match body.kind {
                NodeKind::Seq => body.children,
                NodeKind::Empty => Vec::new(),
                _ => vec![body],
            };
            seq.children.splice(*last..=*last, spliced);
            if seq.children.is_empty() {
                *seq = Ast::empty();
            }
        }
        Mutation::TruncatePrefix => {
            let first_stmt = ast
                .children
                .iter()
                .position(|c| !matches!(c.kind, NodeKind::Def(_)))
                .unwrap_or(ast.children.len());
            let n_stmts = ast.children.len() - first_stmt;
            if n_stmts == 0 {
                return false;
            }
            let keep = r.gen_range(0..n_stmts);
            ast.children.truncate(first_stmt + keep);
        }
    }
    true
}

/// Canonical surface form, or None when the edit broke the program (e.g.
/// a call to a method that no longer exists).
fn normalize(ast: &Ast) -> Option<Ast> {
    let ast = parse(&pretty(ast)).ok()?;
    (ast.statement_count() <= MAX_STATEMENTS).then_some(ast)
}

fn chain_length(r: &mut Rng) -> usize {
    let mut k = 1;
    while !r.gen_bool(CHAIN_P) {
        k += 1;
    }
    k
}

/// Frequency of the submission at 1-based `rank` for a corpus of `n`.
pub fn zipf_frequency(rank: usize, n: usize) -> u64 {
    let top = 100.0 * n.max(1) as f64;
    (top / (rank as f64).powf(ZIPF_EXPONENT)).round().max(1.0) as u64
}

/// Distinct submissions built from weighted random mutation chains of the
/// reference solutions. References come first; frequencies follow a Zipf
/// law over (chain length, generation order). Labels are annotated.
pub fn generate_corpus(task: &Task, n_unique: usize, seed: u64) -> Result<Vec<Submission>, CorpusError> {
    let mut r = rng(seed);
    let beepers = task.tests.iter().any(|t| t.spec.beeper_max > 0);
    let mut seen = HashSet::new();
    let mut programs: Vec<(usize, Ast)> = Vec::new();
    for reference in &task.reference_solutions {
        if programs.len() < n_unique && seen.insert(canonical_id(reference)) {
            programs.push((0, reference.clone()));
        }
    }
    let budget = n_unique * 200 + 1000;
    let mut attempts = 0;
    while programs.len() < n_unique {
        attempts += 1;
        if attempts > budget {
            return Err(CorpusError::Exhausted { found: programs.len(), wanted: n_unique });
        }
        let base = &task.reference_solutions[r.gen_range(0..task.reference_solutions.len())];
        let len = chain_length(&mut r);
        let mut ast = base.clone();
        let mut applied = 0;
        for _ in 0..len * 3 {
            if applied == len {
                break;
            }
            let op = pick_mutation(&mut r);
            let mut candidate = ast.clone();
            if mutate(&mut candidate, op, beepers, &mut r) {
                if let Some(norm) = normalize(&candidate) {
                    ast = norm;
                    applied += 1;
                }
            }
        }
        if applied > 0 && seen.insert(canonical_id(&ast)) {
            programs.push((applied, ast));
        }
    }
    // Stable sort keeps generation order within a chain length.
    programs.sort_by_key(|(len, _)| *len);
    Ok(programs
        .into_iter()
        .enumerate()
        .map(|(i, (_, program))| Submission {
            id: canonical_id(&program),
            labels: annotate(&program, task),
            frequency: zipf_frequency(i + 1, n_unique),
            program,
        })
        .collect())
}

/// A composed program together with its components in execution order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedProgram {
    pub program: Ast,
    pub parts: Vec<Ast>,
}

/// `SEQ[A,B]` (or `SEQ[A,SEQ[B,C]]`) with components drawn uniformly from `pool`.
pub fn compose_corpus(pool: &[Ast], n: usize, parts: usize, seed: u64) -> Vec<ComposedProgram> {
    assert!(!pool.is_empty(), "empty composition pool");
    assert!(parts == 2 || parts == 3, "parts must be 2 or 3");
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let comps: Vec<Ast> = (0..parts).map(|_| pool[r.gen_range(0..pool.len())].clone()).collect();
            let program = if parts == 2 {
                Ast::seq(comps.clone())
            } else {
                Ast::seq(vec![comps[0].clone(), Ast::seq(vec![comps[1].clone(), comps[2].clone()])])
            };
            ComposedProgram { program, parts: comps }
        })
        .collect()
}

// ---- file formats ---------------------------------------------------------

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            other => return Err(format!("bad escape \\{other:?}")),
        }
    }
    Ok(out)
}

/// `digest<TAB>frequency<TAB>escaped source`, one submission per line.
pub fn write_corpus(subs: &[Submission]) -> String {
    subs.iter()
        .map(|s| format!("{}\t{}\t{}\n", s.id, s.frequency, escape(&pretty(&s.program))))
        .collect()
}

/// `digest<TAB>comma-separated labels`.
pub fn write_labels(subs: &[Submission]) -> String {
    subs.iter()
        .map(|s| {
            let labels: Vec<&str> = s.labels.iter().map(String::as_str).collect();
            format!("{}\t{}\n", s.id, labels.join(","))
        })
        .collect()
}

/// `label<TAB>category<TAB>description`.
pub fn write_rubric(task: &Task) -> String {
    task.rubric
        .iter()
        .map(|r| format!("{}\t{}\t{}\n", r.label, r.category, r.description))
        .collect()
}

/// Reads a corpus file and its labels file back into submissions.
pub fn read_corpus(corpus: &str, labels: &str) -> Result<Vec<Submission>, CorpusError> {
    let err = |line: usize, msg: String| CorpusError::Format { line, msg };
    let mut label_map = std::collections::HashMap::new();
    for (i, line) in labels.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let (digest, list) = line.split_once('\t').ok_or_else(|| err(i + 1, "missing tab".into()))?;
        let id: CanonicalId = digest.parse().map_err(|e| err(i + 1, e))?;
        let set: AnnotationSet = list.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
        label_map.insert(id, set);
    }
    let mut out = Vec::new();
    for (i, line) in corpus.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let mut cols = line.splitn(3, '\t');
        let (Some(digest), Some(freq), Some(src)) = (cols.next(), cols.next(), cols.next()) else {
            return Err(err(i + 1, "expected 3 columns".into()));
        };
        let id: CanonicalId = digest.parse().map_err(|e| err(i + 1, e))?;
        let frequency: u64 = freq.parse().map_err(|_| err(i + 1, format!("bad frequency {freq:?}")))?;
        let program = parse(&unescape(src).map_err(|e| err(i + 1, e))?).map_err(|e| err(i + 1, e.to_string()))?;
        if canonical_id(&program) != id {
            return Err(err(i + 1, "digest does not match program".into()));
        }
        let labels = label_map.remove(&id).ok_or_else(|| err(i + 1, format!("no labels for {id}")))?;
        out.push(Submission { program, id, frequency, labels });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn references_pass_their_tasks() {
        for name in TASK_NAMES {
            let task = bundled_task(name).unwrap();
            for r in &task.reference_solutions {
                assert_eq!(run_unit_tests(&modeling_tree(r), &task.tests), 1.0, "{name}: {}", pretty(r));
            }
            assert!((10..=15).contains(&task.rubric.len()), "{name}");
        }
    }

    #[test]
    fn midpoint_reference_marks_middle() {
        let task = bundled_task("midpoint").unwrap();
        for (width, t) in (2..=8).zip(&task.tests) {
            let marked: Vec<usize> = (0..8).filter(|&c| t.expected.beepers[c] > 0).collect();
            assert_eq!(marked, vec![(width - 1) / 2], "width {width}");
        }
    }

    #[test]
    fn maze_reference_reaches_dead_end() {
        let task = bundled_task("maze").unwrap();
        let ends: Vec<(usize, usize)> = task.tests.iter().map(|t| (t.expected.row, t.expected.col)).collect();
        assert_eq!(ends, vec![(0, 4), (4, 4), (0, 4), (2, 0), (2, 0)]);
        // Walking straight is not enough.
        let straight = parse("while(front_is_clear){ move }").unwrap();
        let frac = run_unit_tests(&straight, &task.tests);
        assert!(frac > 0.0 && frac < 1.0);
    }

    #[test]
    fn reference_annotations() {
        let task = bundled_task("maze").unwrap();
        let labels = annotate(&task.reference_solutions[0], &task);
        assert!(labels.contains(CORRECT));
        assert!(!labels.contains(INCORRECT));
        let labels = annotate(&parse("move move turn_left move").unwrap(), &task);
        assert!(labels.contains("missing-while"));
        assert!(labels.contains(INCORRECT));
    }

    #[test]
    fn single_program_corpus_is_reference() {
        let task = bundled_task("midpoint").unwrap();
        let c = generate_corpus(&task, 1, 3).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].program, task.reference_solutions[0]);
        assert!(c[0].labels.contains(CORRECT));
    }

    #[test]
    fn corpus_is_distinct_and_deterministic() {
        let task = bundled_task("maze").unwrap();
        let a = generate_corpus(&task, 150, 42).unwrap();
        let b = generate_corpus(&task, 150, 42).unwrap();
        assert_eq!(write_corpus(&a), write_corpus(&b));
        let ids: HashSet<_> = a.iter().map(|s| s.id).collect();
        assert_eq!(ids.len(), 150);
        for s in &a {
            let reparsed = parse(&pretty(&s.program)).unwrap();
            assert_eq!(canonical_id(&reparsed), s.id);
            assert!(s.frequency >= 1);
        }
        assert!(a.windows(2).all(|w| w[0].frequency >= w[1].frequency));
        let c = generate_corpus(&task, 150, 43).unwrap();
        assert_ne!(write_corpus(&a), write_corpus(&c));
    }

    #[test]
    fn label_histogram_is_non_degenerate() {
        for name in TASK_NAMES {
            let task = bundled_task(name).unwrap();
            let corpus = generate_corpus(&task, 2000, 11).unwrap();
            for rule in &task.rubric {
                let n = corpus.iter().filter(|s| s.labels.contains(rule.label)).count();
                let share = n as f64 / corpus.len() as f64;
                assert!((0.01..=0.99).contains(&share), "{name}/{}: {share}", rule.label);
            }
        }
    }

    #[test]
    fn zipf_top_percent_dominates() {
        let n = 2000;
        let freqs: Vec<u64> = (1..=n).map(|r| zipf_frequency(r, n)).collect();
        let total: u64 = freqs.iter().sum();
        let top: u64 = freqs[..n / 100].iter().sum();
        assert!(top as f64 >= 0.2 * total as f64);
    }

    #[test]
    fn corpus_files_roundtrip() {
        let task = bundled_task("fetch").unwrap();
        let subs = generate_corpus(&task, 40, 9).unwrap();
        let back = read_corpus(&write_corpus(&subs), &write_labels(&subs)).unwrap();
        assert_eq!(back, subs);
        assert!(read_corpus("zz\t1\tmove\n", "").is_err());
    }

    #[test]
    fn annotation_is_idempotent() {
        let task = bundled_task("fetch").unwrap();
        for s in generate_corpus(&task, 30, 5).unwrap() {
            assert_eq!(annotate(&s.program, &task), s.labels);
            assert!(s.labels.contains(CORRECT) ^ s.labels.contains(INCORRECT));
        }
    }

    #[test]
    fn compose_shapes() {
        let out = compose_corpus(&[Ast::mv()], 3, 2, 0);
        assert!(out.iter().all(|c| c.program == Ast::seq(vec![Ast::mv(), Ast::mv()])));
        let pool = vec![Ast::mv(), Ast::turn_left(), parse("repeat(2){ move }").unwrap()];
        for c in compose_corpus(&pool, 20, 3, 1) {
            let bin = crate::dsl::binarize(&c.program);
            assert_eq!(bin.kind, NodeKind::Seq);
            assert_eq!(bin.children[1].kind, NodeKind::Seq);
            assert_eq!(c.parts.len(), 3);
        }
    }

    #[test]
    fn escape_roundtrip() {
        let s = "a\\b\nc\td";
        assert_eq!(unescape(&escape(s)).unwrap(), s);
    }
}
