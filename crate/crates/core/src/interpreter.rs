//! Karel-style execution with Hoare-triple instrumentation.
//!
//! Every statement subtree that starts executing in a non-crashed state
//! yields a triple (state before, subtree id, state after).

use std::collections::{HashMap, HashSet};

use crate::dsl::{node_ids, Ast, CanonicalId, NodeKind};
use crate::gridworld::{encode_state, StateVector, WorldSpec, WorldState};

pub const DEFAULT_STEP_LIMIT: usize = 1000;
pub const DEFAULT_CAP_PER_SUBTREE: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HaltReason {
    Finished,
    Crashed,
    StepLimit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionTrace {
    pub final_state: WorldState,
    pub steps: usize,
    pub halted: HaltReason,
}

/// One observation of a subtree's effect. `world` indexes the world list
/// the triple was extracted from.
#[derive(Clone, Debug, PartialEq)]
pub struct HoareTriple {
    pub pre: StateVector,
    pub subtree: CanonicalId,
    pub post: StateVector,
    pub world: usize,
}

impl HoareTriple {
    /// Dedup key: (pre bits, subtree digest, post bits).
    pub fn key(&self) -> (Vec<u8>, CanonicalId, Vec<u8>) {
        (self.pre.to_bits(), self.subtree, self.post.to_bits())
    }
}

/// A unit test: world, start state, and the exact expected final state.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitTest {
    pub spec: WorldSpec,
    pub start: WorldState,
    pub expected: WorldState,
}

/// Arena form of a tree with precomputed subtree ids.
struct Compiled {
    kinds: Vec<NodeKind>,
    children: Vec<Vec<usize>>,
    ids: Vec<CanonicalId>,
}

impl Compiled {
    fn new(ast: &Ast) -> Compiled {
        let mut c = Compiled {
            kinds: Vec::new(),
            children: Vec::new(),
            ids: node_ids(ast),
        };
        c.push(ast);
        c
    }

    fn push(&mut self, ast: &Ast) -> usize {
        let at = self.kinds.len();
        self.kinds.push(ast.kind.clone());
        self.children.push(Vec::new());
        let kids: Vec<usize> = ast.children.iter().map(|ch| self.push(ch)).collect();
        self.children[at] = kids;
        at
    }
}

struct Machine<'a> {
    prog: &'a Compiled,
    spec: &'a WorldSpec,
    state: WorldState,
    steps: usize,
    loop_checks: usize,
    limit: usize,
    record: Option<&'a mut Vec<(WorldState, CanonicalId, WorldState)>>,
}

/// Raised when the step budget runs out; unwinds the whole run.
struct OutOfSteps;

impl Machine<'_> {
    fn exec(&mut self, node: usize) -> Result<(), OutOfSteps> {
        if self.state.crashed {
            return Ok(());
        }
        let pre = self.record.is_some().then(|| self.state.clone());
        self.exec_inner(node)?;
        if let (Some(pre), Some(rec)) = (pre, self.record.as_deref_mut()) {
            rec.push((pre, self.prog.ids[node], self.state.clone()));
        }
        Ok(())
    }

    fn exec_inner(&mut self, node: usize) -> Result<(), OutOfSteps> {
        let kids = &self.prog.children[node];
        match &self.prog.kinds[node] {
            k if k.is_primitive() => {
                if self.steps >= self.limit {
                    return Err(OutOfSteps);
                }
                self.steps += 1;
                self.primitive(k);
            }
            NodeKind::Seq => {
                for &c in kids {
                    self.exec(c)?;
                }
            }
            NodeKind::Repeat => {
                let NodeKind::Num(times) = self.prog.kinds[kids[0]] else {
                    return Ok(());
                };
                for _ in 0..times {
                    self.exec(kids[1])?;
                }
            }
            NodeKind::While => {
                while !self.state.crashed && self.test(kids[0]) {
                    // Condition tests are free, so bodies that never take a
                    // step would loop forever without this bound.
                    self.loop_checks += 1;
                    if self.loop_checks > self.limit {
                        return Err(OutOfSteps);
                    }
                    self.exec(kids[1])?;
                }
            }
            NodeKind::If => {
                if self.test(kids[0]) {
                    self.exec(kids[1])?;
                }
            }
            NodeKind::IfElse => {
                let branch = if self.test(kids[0]) { kids[1] } else { kids[2] };
                self.exec(branch)?;
            }
            // EMPTY, and CALL/DEF which never appear in inlined trees.
            _ => {}
        }
        Ok(())
    }

    fn primitive(&mut self, kind: &NodeKind) {
        let s = &mut self.state;
        match kind {
            NodeKind::Move => {
                let (dr, dc) = s.heading.delta();
                let (r, c) = (s.row as i64 + dr, s.col as i64 + dc);
                if self.spec.is_open(r, c) {
                    s.row = r as usize;
                    s.col = c as usize;
                } else {
                    s.crashed = true;
                }
            }
            NodeKind::TurnLeft => s.heading = s.heading.left(),
            NodeKind::TurnRight => s.heading = s.heading.right(),
            NodeKind::PutBeeper => {
                let cell = self.spec.cell(s.row, s.col);
                s.beepers[cell] = (s.beepers[cell] + 1).min(self.spec.beeper_max);
            }
            NodeKind::PickBeeper => {
                let cell = self.spec.cell(s.row, s.col);
                if s.beepers[cell] == 0 {
                    s.crashed = true;
                } else {
                    s.beepers[cell] -= 1;
                }
            }
            _ => unreachable!("not a primitive"),
        }
    }

    fn test(&self, node: usize) -> bool {
        let s = &self.state;
        let open_toward = |h: crate::gridworld::Heading| {
            let (dr, dc) = h.delta();
            self.spec.is_open(s.row as i64 + dr, s.col as i64 + dc)
        };
        match &self.prog.kinds[node] {
            NodeKind::Not => !self.test(self.prog.children[node][0]),
            NodeKind::FrontClear => open_toward(s.heading),
            NodeKind::LeftClear => open_toward(s.heading.left()),
            NodeKind::RightClear => open_toward(s.heading.right()),
            NodeKind::BeepersPresent => s.beepers[self.spec.cell(s.row, s.col)] > 0,
            NodeKind::FacingNorth => s.heading == crate::gridworld::Heading::North,
            NodeKind::FacingEast => s.heading == crate::gridworld::Heading::East,
            NodeKind::FacingSouth => s.heading == crate::gridworld::Heading::South,
            NodeKind::FacingWest => s.heading == crate::gridworld::Heading::West,
            _ => false,
        }
    }
}

fn execute(
    prog: &Compiled,
    spec: &WorldSpec,
    start: &WorldState,
    step_limit: usize,
    record: Option<&mut Vec<(WorldState, CanonicalId, WorldState)>>,
) -> ExecutionTrace {
    let mut m = Machine {
        prog,
        spec,
        state: start.clone(),
        steps: 0,
        loop_checks: 0,
        limit: step_limit,
        record,
    };
    let halted = match m.exec(0) {
        Err(OutOfSteps) => HaltReason::StepLimit,
        Ok(()) if m.state.crashed => HaltReason::Crashed,
        Ok(()) => HaltReason::Finished,
    };
    ExecutionTrace {
        final_state: m.state,
        steps: m.steps,
        halted,
    }
}

/// Runs an inlined program. Crashes and runaway loops are outcomes, not errors.
pub fn run(prog: &Ast, spec: &WorldSpec, start: &WorldState, step_limit: usize) -> ExecutionTrace {
    execute(&Compiled::new(prog), spec, start, step_limit, None)
}

/// Runs `prog` on every world and collects the triples of all statement
/// subtrees. Equivalent triples are collapsed and at most
/// `cap_per_subtree` distinct triples are kept per subtree id (first seen
/// wins). A run cut off by the step limit still yields a root triple whose
/// post is the state at the cutoff.
pub fn extract_triples(
    prog: &Ast,
    worlds: &[(WorldSpec, WorldState)],
    step_limit: usize,
    cap_per_subtree: usize,
) -> Vec<HoareTriple> {
    let compiled = Compiled::new(prog);
    let root_is_stmt = compiled.kinds[0].is_statement();
    let mut seen = HashSet::new();
    let mut per_id: HashMap<CanonicalId, usize> = HashMap::new();
    let mut out = Vec::new();
    for (w, (spec, start)) in worlds.iter().enumerate() {
        let mut raw = Vec::new();
        let trace = execute(&compiled, spec, start, step_limit, Some(&mut raw));
        if trace.halted == HaltReason::StepLimit && root_is_stmt {
            raw.push((start.clone(), compiled.ids[0], trace.final_state.clone()));
        }
        for (pre, id, post) in raw {
            if *per_id.get(&id).unwrap_or(&0) >= cap_per_subtree {
                continue;
            }
            let triple = HoareTriple {
                pre: encode_state(&pre, spec).expect("interpreter keeps states inside the world"),
                subtree: id,
                post: encode_state(&post, spec).expect("interpreter keeps states inside the world"),
                world: w,
            };
            if seen.insert(triple.key()) {
                *per_id.entry(id).or_insert(0) += 1;
                out.push(triple);
            }
        }
    }
    out
}

/// Fraction of tests whose run finishes cleanly in exactly the expected state.
pub fn run_unit_tests(prog: &Ast, tests: &[UnitTest]) -> f64 {
    if tests.is_empty() {
        return 0.0;
    }
    let compiled = Compiled::new(prog);
    let passed = tests
        .iter()
        .filter(|t| {
            let trace = execute(&compiled, &t.spec, &t.start, DEFAULT_STEP_LIMIT, None);
            trace.halted == HaltReason::Finished && trace.final_state == t.expected
        })
        .count();
    passed as f64 / tests.len() as f64
}

/// Runs every test and returns the traces, for rubric predicates.
pub fn run_all(prog: &Ast, tests: &[UnitTest], step_limit: usize) -> Vec<ExecutionTrace> {
    let compiled = Compiled::new(prog);
    tests
        .iter()
        .map(|t| execute(&compiled, &t.spec, &t.start, step_limit, None))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{binarize, canonical_id, parse};
    use crate::gridworld::Heading;

    fn row_world(cols: usize) -> (WorldSpec, WorldState) {
        let spec = WorldSpec::new(1, cols, 1).unwrap();
        let start = WorldState {
            row: 0,
            col: 0,
            heading: Heading::East,
            crashed: false,
            beepers: vec![0; cols],
        };
        (spec, start)
    }

    #[test]
    fn move_steps_forward() {
        let (spec, start) = row_world(3);
        let t = run(&parse("move").unwrap(), &spec, &start, 100);
        assert_eq!(t.final_state.col, 1);
        assert_eq!(t.halted, HaltReason::Finished);
        assert_eq!(t.steps, 1);
    }

    #[test]
    fn move_into_edge_crashes_in_place() {
        let (spec, mut start) = row_world(3);
        start.col = 2;
        let t = run(&parse("move").unwrap(), &spec, &start, 100);
        assert!(t.final_state.crashed);
        assert_eq!(t.final_state.col, 2);
        assert_eq!(t.halted, HaltReason::Crashed);
    }

    #[test]
    fn while_walks_to_wall() {
        let (spec, start) = row_world(5);
        let t = run(&parse("while(front_is_clear){move}").unwrap(), &spec, &start, 100);
        assert_eq!(t.final_state.col, 4);
        assert_eq!(t.steps, 4);
        assert_eq!(t.halted, HaltReason::Finished);
    }

    #[test]
    fn walls_block_moves() {
        let (spec, start) = row_world(5);
        let spec = spec.with_wall(0, 3);
        let t = run(&parse("while(front_is_clear){move}").unwrap(), &spec, &start, 100);
        assert_eq!(t.final_state.col, 2);
    }

    #[test]
    fn beepers_saturate_and_pick_empty_crashes() {
        let (spec, start) = row_world(2);
        let t = run(&parse("put_beeper put_beeper").unwrap(), &spec, &start, 100);
        assert_eq!(t.final_state.beepers[0], 1);
        assert!(!t.final_state.crashed);
        let t = run(&parse("pick_beeper move").unwrap(), &spec, &start, 100);
        assert!(t.final_state.crashed);
        assert_eq!(t.final_state.col, 0);
        assert_eq!(t.steps, 1);
    }

    #[test]
    fn step_limit_halts() {
        let (spec, start) = row_world(2);
        let t = run(&parse("while(facing_east){ turn_left turn_right }").unwrap(), &spec, &start, 7);
        assert_eq!(t.halted, HaltReason::StepLimit);
        assert_eq!(t.steps, 7);
        // A body that never takes a step is still bounded.
        let t = run(&parse("while(front_is_clear){ if(facing_north){ move } }").unwrap(), &spec, &start, 50);
        assert_eq!(t.halted, HaltReason::StepLimit);
        assert_eq!(t.steps, 0);
    }

    #[test]
    fn crash_is_absorbing() {
        let (spec, mut start) = row_world(3);
        start.col = 2;
        let t = run(&parse("move turn_left put_beeper").unwrap(), &spec, &start, 100);
        assert_eq!(t.final_state.heading, Heading::East);
        assert_eq!(t.final_state.beepers[2], 0);
        assert_eq!(t.steps, 1);
    }

    #[test]
    fn single_move_single_triple() {
        let w = row_world(3);
        let triples = extract_triples(&parse("move").unwrap(), &[w], 100, 50);
        assert_eq!(triples.len(), 1);
        assert_eq!(triples[0].subtree, canonical_id(&parse("move").unwrap()));
    }

    #[test]
    fn repeat_triples_by_hand() {
        let w = row_world(5);
        let prog = parse("repeat(3){move}").unwrap();
        let triples = extract_triples(&prog, &[w], 100, 50);
        let count = |ast: &Ast| triples.iter().filter(|t| t.subtree == canonical_id(ast)).count();
        assert_eq!(count(&prog), 1);
        assert_eq!(count(&prog.children[1]), 3);
        assert_eq!(count(&Ast::mv()), 3);
        assert_eq!(triples.len(), 7);
        // Binarized: the body collapses to MOVE, whose triples are shared.
        let triples = extract_triples(&binarize(&prog), &[row_world(5)], 100, 50);
        assert_eq!(triples.len(), 4);
    }

    #[test]
    fn cap_limits_each_subtree() {
        let w = row_world(8);
        let triples = extract_triples(&parse("while(front_is_clear){move}").unwrap(), &[w], 100, 2);
        let moves = triples
            .iter()
            .filter(|t| t.subtree == canonical_id(&Ast::mv()))
            .count();
        assert_eq!(moves, 2);
    }

    #[test]
    fn sequence_triples_compose() {
        let w = row_world(6);
        let prog = parse("move turn_left turn_right move").unwrap();
        let triples = extract_triples(&prog, &[w], 100, 50);
        let root = triples.iter().find(|t| t.subtree == canonical_id(&prog)).unwrap();
        let first = &triples[0];
        assert_eq!(root.pre, first.pre);
        let last = triples.iter().rev().find(|t| t.subtree != root.subtree).unwrap();
        assert_eq!(root.post, last.post);
    }

    #[test]
    fn step_limit_still_emits_root() {
        let w = row_world(2);
        let prog = parse("while(facing_east){ turn_left turn_right }").unwrap();
        let triples = extract_triples(&prog, &[w], 9, 50);
        assert!(triples.iter().any(|t| t.subtree == canonical_id(&prog)));
    }

    #[test]
    fn unit_test_fraction() {
        let (spec, start) = row_world(4);
        let prog = parse("while(front_is_clear){move}").unwrap();
        let expected = run(&prog, &spec, &start, 100).final_state;
        let tests = vec![UnitTest {
            spec: spec.clone(),
            start: start.clone(),
            expected,
        }];
        assert_eq!(run_unit_tests(&prog, &tests), 1.0);
        assert_eq!(run_unit_tests(&Ast::empty(), &tests), 0.0);
    }
}
