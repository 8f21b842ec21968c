//! Gridworld machine state and its block one-hot encoding.
//!
//! A [`WorldSpec`] is the static task geometry (size, walls, beeper cap).
//! A [`WorldState`] is everything a program can change. States encode to a
//! [`StateVector`] made of consecutive one-hot blocks:
//! `[row | col | heading | crashed | cell(0,0) | ... | cell(r-1,c-1)]`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("state outside world spec: {0}")]
    StateOutsideSpec(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("world file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("bad world spec: {0}")]
    BadSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Heading {
        Heading::ALL[i % 4]
    }

    pub fn left(self) -> Heading {
        Heading::from_index(self.index() + 3)
    }

    pub fn right(self) -> Heading {
        Heading::from_index(self.index() + 1)
    }

    /// (row delta, col delta); row 0 is the north edge.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Heading::North => (-1, 0),
            Heading::East => (0, 1),
            Heading::South => (1, 0),
            Heading::West => (0, -1),
        }
    }

    pub fn letter(self) -> char {
        ['N', 'E', 'S', 'W'][self.index()]
    }

    pub fn from_letter(c: &str) -> Option<Heading> {
        match c {
            "N" => Some(Heading::North),
            "E" => Some(Heading::East),
            "S" => Some(Heading::South),
            "W" => Some(Heading::West),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WorldSpec {
    pub rows: usize,
    pub cols: usize,
    /// Row-major wall mask.
    pub walls: Vec<bool>,
    pub beeper_max: u8,
}

impl WorldSpec {
    pub fn new(rows: usize, cols: usize, beeper_max: u8) -> Result<WorldSpec, GridError> {
        if rows == 0 || cols == 0 {
            return Err(GridError::BadSpec(format!("{rows}x{cols} grid")));
        }
        Ok(WorldSpec {
            rows,
            cols,
            walls: vec![false; rows * cols],
            beeper_max,
        })
    }

    pub fn with_wall(mut self, row: usize, col: usize) -> WorldSpec {
        let i = self.cell(row, col);
        self.walls[i] = true;
        self
    }

    pub fn cell(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn is_wall(&self, row: usize, col: usize) -> bool {
        self.walls[self.cell(row, col)]
    }

    /// True when (row, col) is inside the grid and not a wall.
    pub fn is_open(&self, row: i64, col: i64) -> bool {
        row >= 0
            && col >= 0
            && (row as usize) < self.rows
            && (col as usize) < self.cols
            && !self.is_wall(row as usize, col as usize)
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self.rows, self.cols, self.beeper_max)
    }

    /// An agent-free state: (0,0) facing east, no beepers.
    pub fn blank_state(&self) -> WorldState {
        WorldState {
            row: 0,
            col: 0,
            heading: Heading::East,
            crashed: false,
            beepers: vec![0; self.rows * self.cols],
        }
    }

    pub fn check(&self, s: &WorldState) -> Result<(), GridError> {
        if s.row >= self.rows || s.col >= self.cols {
            return Err(GridError::StateOutsideSpec(format!(
                "agent at ({}, {}) in {}x{} grid",
                s.row, s.col, self.rows, self.cols
            )));
        }
        if s.beepers.len() != self.rows * self.cols {
            return Err(GridError::StateOutsideSpec(format!(
                "{} beeper cells for {} grid cells",
                s.beepers.len(),
                self.rows * self.cols
            )));
        }
        if let Some(b) = s.beepers.iter().find(|&&b| b > self.beeper_max) {
            return Err(GridError::StateOutsideSpec(format!(
                "beeper count {b} above cap {}",
                self.beeper_max
            )));
        }
        if !s.crashed && self.is_wall(s.row, s.col) {
            return Err(GridError::StateOutsideSpec(format!(
                "agent inside wall at ({}, {})",
                s.row, s.col
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorldState {
    pub row: usize,
    pub col: usize,
    pub heading: Heading,
    pub crashed: bool,
    /// Row-major beeper counts.
    pub beepers: Vec<u8>,
}

/// Block structure of the state encoding; depends only on grid size and
/// beeper cap, so worlds that differ only in walls share a layout.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StateLayout {
    pub rows: usize,
    pub cols: usize,
    pub beeper_max: u8,
}

impl StateLayout {
    pub fn new(rows: usize, cols: usize, beeper_max: u8) -> StateLayout {
        StateLayout {
            rows,
            cols,
            beeper_max,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Block sizes in encoding order.
    pub fn block_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.rows, self.cols, 4, 2];
        sizes.extend(std::iter::repeat_n(
            usize::from(self.beeper_max) + 1,
            self.cell_count(),
        ));
        sizes
    }

    /// (offset, size) of every block.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.block_sizes()
            .into_iter()
            .map(|n| {
                let b = (off, n);
                off += n;
                b
            })
            .collect()
    }

    /// d = rows + cols + 4 + 2 + rows*cols*(beeper_max+1)
    pub fn dim(&self) -> usize {
        self.rows + self.cols + 6 + self.cell_count() * (usize::from(self.beeper_max) + 1)
    }

    /// Number of state variables scored by [`state_variable_accuracy`].
    /// Beeper cells count only when beepers exist in the world.
    pub fn variable_count(&self) -> usize {
        4 + if self.beeper_max > 0 { self.cell_count() } else { 0 }
    }
}

impl fmt::Display for StateLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "row:{}|col:{}|heading:4|crashed:2|cells:{}x{}",
            self.rows,
            self.cols,
            self.cell_count(),
            usize::from(self.beeper_max) + 1
        )
    }
}

impl std::str::FromStr for StateLayout {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GridError::BadSpec(format!("layout string {s:?}"));
        let parts: Vec<&str> = s.split('|').collect();
        if parts.len() != 5 {
            return Err(bad());
        }
        let field = |p: &str, key: &str| -> Result<String, GridError> {
            p.strip_prefix(key)
                .and_then(|r| r.strip_prefix(':'))
                .map(str::to_string)
                .ok_or_else(bad)
        };
        let rows: usize = field(parts[0], "row")?.parse().map_err(|_| bad())?;
        let cols: usize = field(parts[1], "col")?.parse().map_err(|_| bad())?;
        let cells = field(parts[4], "cells")?;
        let (_, per) = cells.split_once('x').ok_or_else(bad)?;
        let per: usize = per.parse().map_err(|_| bad())?;
        if per == 0 || per > 256 {
            return Err(bad());
        }
        let layout = StateLayout::new(rows, cols, (per - 1) as u8);
        if layout.to_string() != s {
            return Err(bad());
        }
        Ok(layout)
    }
}

/// Dense encoding of a state; entries are 0/1 for concrete states.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Bits packed LSB-first, one bit per entry (set when > 0.5).
    pub fn to_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.0.len().div_ceil(8)];
        for (i, v) in self.0.iter().enumerate() {
            if *v > 0.5 {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_bits(bits: &[u8], dim: usize) -> Result<StateVector, GridError> {
        if bits.len() != dim.div_ceil(8) {
            return Err(GridError::DimensionMismatch {
                expected: dim.div_ceil(8),
                found: bits.len(),
            });
        }
        Ok(StateVector(
            (0..dim)
                .map(|i| f64::from((bits[i / 8] >> (i % 8)) & 1))
                .collect(),
        ))
    }

    /// Index of the largest entry of each block (first wins ties).
    pub fn hot_indices(&self, layout: &StateLayout) -> Vec<usize> {
        layout
            .blocks()
            .into_iter()
            .map(|(off, n)| off + argmax(&self.0[off..off + n]))
            .collect()
    }
}

fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn encode_state(s: &WorldState, spec: &WorldSpec) -> Result<StateVector, GridError> {
    spec.check(s)?;
    let layout = spec.layout();
    let mut v = vec![0.0; layout.dim()];
    for (hot, (off, _)) in state_block_values(s).into_iter().zip(layout.blocks()) {
        v[off + hot] = 1.0;
    }
    Ok(StateVector(v))
}

/// Per-block hot index of a state, in layout order.
pub fn state_block_values(s: &WorldState) -> Vec<usize> {
    let mut out = vec![s.row, s.col, s.heading.index(), usize::from(s.crashed)];
    out.extend(s.beepers.iter().map(|&b| usize::from(b)));
    out
}

/// Argmax decoding of per-block scores. The result is not checked against
/// walls: predictions may be physically impossible.
pub fn decode_state<T: PartialOrd + Copy>(
    values: &[T],
    layout: &StateLayout,
) -> Result<WorldState, GridError> {
    if values.len() != layout.dim() {
        return Err(GridError::DimensionMismatch {
            expected: layout.dim(),
            found: values.len(),
        });
    }
    let blocks = layout.blocks();
    let pick = |b: usize| {
        let (off, n) = blocks[b];
        argmax(&values[off..off + n])
    };
    Ok(WorldState {
        row: pick(0),
        col: pick(1),
        heading: Heading::from_index(pick(2)),
        crashed: pick(3) == 1,
        beepers: (4..blocks.len()).map(|b| pick(b) as u8).collect(),
    })
}

/// Fraction of state variables (row, col, heading, crashed, and each cell's
/// beeper count in beeper worlds) on which two states agree.
pub fn state_variable_accuracy(predicted: &WorldState, actual: &WorldState, layout: &StateLayout) -> f64 {
    let mut agree = usize::from(predicted.row == actual.row)
        + usize::from(predicted.col == actual.col)
        + usize::from(predicted.heading == actual.heading)
        + usize::from(predicted.crashed == actual.crashed);
    if layout.beeper_max > 0 {
        agree += predicted
            .beepers
            .iter()
            .zip(&actual.beepers)
            .filter(|(a, b)| a == b)
            .count();
    }
    agree as f64 / layout.variable_count() as f64
}

/// Renders one world record in the text world format.
pub fn format_world(spec: &WorldSpec, start: &WorldState) -> String {
    let mut out = format!("{} {} {}\n", spec.rows, spec.cols, spec.beeper_max);
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let i = spec.cell(r, c);
            let ch = if spec.walls[i] {
                '#'
            } else if start.beepers[i] > 0 {
                char::from(b'0' + start.beepers[i].min(9))
            } else {
                '.'
            };
            out.push(ch);
        }
        out.push('\n');
    }
    out.push_str(&format!(
        "agent {} {} {}\n",
        start.row,
        start.col,
        start.heading.letter()
    ));
    out
}

/// Parses one or more world records separated by blank lines.
pub fn parse_worlds(text: &str) -> Result<Vec<(WorldSpec, WorldState)>, GridError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].1.is_empty() {
            i += 1;
            continue;
        }
        let (n, header) = lines[i];
        let err = |line: usize, msg: String| GridError::Format { line, msg };
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(n, format!("header: {e}")))?;
        if nums.len() != 3 || nums[2] > 255 {
            return Err(err(n, "expected `rows cols beeper_max`".into()));
        }
        let mut spec = WorldSpec::new(nums[0], nums[1], nums[2] as u8).map_err(|e| err(n, e.to_string()))?;
        let mut state = spec.blank_state();
        for r in 0..spec.rows {
            let (ln, row) = *lines
                .get(i + 1 + r)
                .ok_or_else(|| err(n, "missing grid rows".into()))?;
            let chars: Vec<char> = row.chars().collect();
            if chars.len() != spec.cols {
                return Err(err(ln, format!("expected {} cells, found {}", spec.cols, chars.len())));
            }
            for (c, ch) in chars.into_iter().enumerate() {
                let cell = spec.cell(r, c);
                match ch {
                    '.' => {}
                    '#' => spec.walls[cell] = true,
                    d if d.is_ascii_digit() => state.beepers[cell] = d as u8 - b'0',
                    other => return Err(err(ln, format!("bad cell character {other:?}"))),
                }
            }
        }
        let agent_line = i + 1 + spec.rows;
        let (ln, agent) = *lines
            .get(agent_line)
            .ok_or_else(|| err(n, "missing agent line".into()))?;
        let toks: Vec<&str> = agent.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "agent" {
            return Err(err(ln, "expected `agent row col heading`".into()));
        }
        state.row = toks[1].parse().map_err(|_| err(ln, "bad agent row".into()))?;
        state.col = toks[2].parse().map_err(|_| err(ln, "bad agent col".into()))?;
        state.heading = Heading::from_letter(toks[3]).ok_or_else(|| err(ln, "bad heading".into()))?;
        spec.check(&state).map_err(|e| err(ln, e.to_string()))?;
        out.push((spec, state));
        i = agent_line + 1;
    }
    Ok(out)
}
