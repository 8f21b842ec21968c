//! Front-end for the gridworld language: syntax trees, parsing, pretty
//! printing, content ids, and the tree rewrites used before modeling.
//!
//! Surface programs may define parameterless methods (`def name { ... }`)
//! and call them (`name()`). Models only ever see the *modeling tree*:
//! calls inlined ([`inline_calls`]) and sequences folded to binary nodes
//! ([`binarize`]).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default call-inlining depth.
pub const DEFAULT_INLINE_DEPTH: usize = 8;

/// Largest literal accepted by `repeat(k)`.
pub const MAX_REPEAT: u8 = 10;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Move,
    TurnLeft,
    TurnRight,
    PutBeeper,
    PickBeeper,
    Repeat,
    While,
    If,
    IfElse,
    Seq,
    Empty,
    Not,
    FrontClear,
    LeftClear,
    RightClear,
    BeepersPresent,
    FacingNorth,
    FacingEast,
    FacingSouth,
    FacingWest,
    /// Repeat count literal, 1..=10.
    Num(u8),
    Def(String),
    Call(String),
}

impl NodeKind {
    /// Upper-case type tag, e.g. `MOVE`, `NUM_3`, `COND_FRONT_CLEAR`.
    /// Method names are not part of the tag.
    pub fn tag(&self) -> String {
        match self {
            NodeKind::Num(k) => format!("NUM_{k}"),
            other => other.static_tag().to_string(),
        }
    }

    fn static_tag(&self) -> &'static str {
        match self {
            NodeKind::Move => "MOVE",
            NodeKind::TurnLeft => "TURN_LEFT",
            NodeKind::TurnRight => "TURN_RIGHT",
            NodeKind::PutBeeper => "PUT_BEEPER",
            NodeKind::PickBeeper => "PICK_BEEPER",
            NodeKind::Repeat => "REPEAT",
            NodeKind::While => "WHILE",
            NodeKind::If => "IF",
            NodeKind::IfElse => "IFELSE",
            NodeKind::Seq => "SEQ",
            NodeKind::Empty => "EMPTY",
            NodeKind::Not => "NOT",
            NodeKind::FrontClear => "COND_FRONT_CLEAR",
            NodeKind::LeftClear => "COND_LEFT_CLEAR",
            NodeKind::RightClear => "COND_RIGHT_CLEAR",
            NodeKind::BeepersPresent => "COND_BEEPERS_PRESENT",
            NodeKind::FacingNorth => "COND_FACING_N",
            NodeKind::FacingEast => "COND_FACING_E",
            NodeKind::FacingSouth => "COND_FACING_S",
            NodeKind::FacingWest => "COND_FACING_W",
            NodeKind::Num(_) => "NUM",
            NodeKind::Def(_) => "DEF",
            NodeKind::Call(_) => "CALL",
        }
    }

    /// Condition atoms (not including `NOT`).
    pub fn is_atom(&self) -> bool {
        matches!(
            self,
            NodeKind::FrontClear
                | NodeKind::LeftClear
                | NodeKind::RightClear
                | NodeKind::BeepersPresent
                | NodeKind::FacingNorth
                | NodeKind::FacingEast
                | NodeKind::FacingSouth
                | NodeKind::FacingWest
        )
    }

    pub fn is_condition(&self) -> bool {
        self.is_atom() || *self == NodeKind::Not
    }

    /// Kinds that occupy statement positions and therefore get embedded.
    pub fn is_statement(&self) -> bool {
        matches!(
            self,
            NodeKind::Move
                | NodeKind::TurnLeft
                | NodeKind::TurnRight
                | NodeKind::PutBeeper
                | NodeKind::PickBeeper
                | NodeKind::Repeat
                | NodeKind::While
                | NodeKind::If
                | NodeKind::IfElse
                | NodeKind::Seq
                | NodeKind::Empty
                | NodeKind::Call(_)
        )
    }

    pub fn is_primitive(&self) -> bool {
        matches!(
            self,
            NodeKind::Move
                | NodeKind::TurnLeft
                | NodeKind::TurnRight
                | NodeKind::PutBeeper
                | NodeKind::PickBeeper
        )
    }

    /// Decision points counted by cyclomatic complexity.
    pub fn is_decision(&self) -> bool {
        matches!(
            self,
            NodeKind::Repeat | NodeKind::While | NodeKind::If | NodeKind::IfElse
        )
    }

    fn keyword(&self) -> Option<&'static str> {
        Some(match self {
            NodeKind::Move => "move",
            NodeKind::TurnLeft => "turn_left",
            NodeKind::TurnRight => "turn_right",
            NodeKind::PutBeeper => "put_beeper",
            NodeKind::PickBeeper => "pick_beeper",
            NodeKind::FrontClear => "front_is_clear",
            NodeKind::LeftClear => "left_is_clear",
            NodeKind::RightClear => "right_is_clear",
            NodeKind::BeepersPresent => "beepers_present",
            NodeKind::FacingNorth => "facing_north",
            NodeKind::FacingEast => "facing_east",
            NodeKind::FacingSouth => "facing_south",
            NodeKind::FacingWest => "facing_west",
            _ => return None,
        })
    }
}

const PRIMITIVES: [NodeKind; 5] = [
    NodeKind::Move,
    NodeKind::TurnLeft,
    NodeKind::TurnRight,
    NodeKind::PutBeeper,
    NodeKind::PickBeeper,
];

pub const ATOMS: [NodeKind; 8] = [
    NodeKind::FrontClear,
    NodeKind::LeftClear,
    NodeKind::RightClear,
    NodeKind::BeepersPresent,
    NodeKind::FacingNorth,
    NodeKind::FacingEast,
    NodeKind::FacingSouth,
    NodeKind::FacingWest,
];

const RESERVED: [&str; 8] = ["def", "repeat", "while", "if", "else", "not", "true", "false"];

/// A program syntax tree. Every statement subtree is itself a program.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ast {
    pub kind: NodeKind,
    pub children: Vec<Ast>,
}

impl Ast {
    pub fn leaf(kind: NodeKind) -> Ast {
        Ast {
            kind,
            children: Vec::new(),
        }
    }

    pub fn mv() -> Ast {
        Ast::leaf(NodeKind::Move)
    }

    pub fn turn_left() -> Ast {
        Ast::leaf(NodeKind::TurnLeft)
    }

    pub fn turn_right() -> Ast {
        Ast::leaf(NodeKind::TurnRight)
    }

    pub fn put_beeper() -> Ast {
        Ast::leaf(NodeKind::PutBeeper)
    }

    pub fn pick_beeper() -> Ast {
        Ast::leaf(NodeKind::PickBeeper)
    }

    pub fn empty() -> Ast {
        Ast::leaf(NodeKind::Empty)
    }

    pub fn seq(children: Vec<Ast>) -> Ast {
        Ast {
            kind: NodeKind::Seq,
            children,
        }
    }

    /// A block as the parser builds it: `EMPTY` for no statements, `SEQ` otherwise.
    pub fn block(stmts: Vec<Ast>) -> Ast {
        if stmts.is_empty() {
            Ast::empty()
        } else {
            Ast::seq(stmts)
        }
    }

    pub fn repeat(count: u8, body: Ast) -> Ast {
        Ast {
            kind: NodeKind::Repeat,
            children: vec![Ast::leaf(NodeKind::Num(count)), body],
        }
    }

    pub fn while_loop(cond: Ast, body: Ast) -> Ast {
        Ast {
            kind: NodeKind::While,
            children: vec![cond, body],
        }
    }

    pub fn if_then(cond: Ast, body: Ast) -> Ast {
        Ast {
            kind: NodeKind::If,
            children: vec![cond, body],
        }
    }

    pub fn if_else(cond: Ast, then: Ast, otherwise: Ast) -> Ast {
        Ast {
            kind: NodeKind::IfElse,
            children: vec![cond, then, otherwise],
        }
    }

    pub fn not(cond: Ast) -> Ast {
        Ast {
            kind: NodeKind::Not,
            children: vec![cond],
        }
    }

    pub fn def(name: &str, body: Ast) -> Ast {
        Ast {
            kind: NodeKind::Def(name.to_string()),
            children: vec![body],
        }
    }

    pub fn call(name: &str) -> Ast {
        Ast::leaf(NodeKind::Call(name.to_string()))
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Total number of nodes, conditions and literals included.
    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(Ast::node_count).sum::<usize>()
    }

    pub fn statement_count(&self) -> usize {
        usize::from(self.kind.is_statement())
            + self.children.iter().map(Ast::statement_count).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(Ast::depth).max().unwrap_or(0)
    }

    /// Pre-order visit of every node.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Ast)) {
        f(self);
        for c in &self.children {
            c.walk(f);
        }
    }

    pub fn contains_kind(&self, pred: impl Fn(&NodeKind) -> bool) -> bool {
        let mut found = false;
        self.walk(&mut |n| found |= pred(&n.kind));
        found
    }

    pub fn count_kind(&self, pred: impl Fn(&NodeKind) -> bool) -> usize {
        let mut n = 0;
        self.walk(&mut |node| n += usize::from(pred(&node.kind)));
        n
    }

    /// Checks the arity and position invariants of the tree.
    pub fn validate(&self) -> Result<(), String> {
        self.validate_at(Position::Statement)
    }

    fn validate_at(&self, pos: Position) -> Result<(), String> {
        let kind = &self.kind;
        let ok_pos = match pos {
            Position::Statement => kind.is_statement() || matches!(kind, NodeKind::Def(_)),
            Position::Condition => kind.is_condition(),
            Position::Count => matches!(kind, NodeKind::Num(_)),
        };
        if !ok_pos {
            return Err(format!("{} not allowed in {:?} position", kind.tag(), pos));
        }
        let expect: &[Position] = match kind {
            NodeKind::Repeat => &[Position::Count, Position::Statement],
            NodeKind::While | NodeKind::If => &[Position::Condition, Position::Statement],
            NodeKind::IfElse => &[Position::Condition, Position::Statement, Position::Statement],
            NodeKind::Not => &[Position::Condition],
            NodeKind::Def(_) => &[Position::Statement],
            NodeKind::Seq => {
                if self.children.is_empty() {
                    return Err("SEQ without children".into());
                }
                for c in &self.children {
                    c.validate_at(Position::Statement)?;
                }
                return Ok(());
            }
            _ => &[],
        };
        if let NodeKind::Num(k) = kind {
            if !(1..=MAX_REPEAT).contains(k) {
                return Err(format!("repeat count {k} out of range"));
            }
        }
        if let NodeKind::Not = kind {
            if self.children.first().map(|c| !c.kind.is_atom()).unwrap_or(false) {
                return Err("NOT must wrap a condition atom".into());
            }
        }
        if self.children.len() != expect.len() {
            return Err(format!(
                "{} expects {} children, found {}",
                kind.tag(),
                expect.len(),
                self.children.len()
            ));
        }
        for (c, p) in self.children.iter().zip(expect) {
            c.validate_at(*p)?;
        }
        Ok(())
    }

    /// Canonical serialization; equal bytes iff structurally equal trees.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_canonical(&mut out, &mut Vec::new());
        out
    }

    /// Writes the serialization; `spans` receives each node's byte range
    /// in pre-order.
    fn write_canonical(&self, out: &mut Vec<u8>, spans: &mut Vec<(usize, usize)>) {
        let slot = spans.len();
        spans.push((out.len(), 0));
        out.push(b'(');
        out.extend_from_slice(self.kind.static_tag().as_bytes());
        match &self.kind {
            NodeKind::Num(k) => {
                out.push(b'_');
                out.extend_from_slice(k.to_string().as_bytes());
            }
            NodeKind::Def(name) | NodeKind::Call(name) => {
                out.push(b':');
                out.extend_from_slice(name.as_bytes());
            }
            _ => {}
        }
        for c in &self.children {
            out.push(b' ');
            c.write_canonical(out, spans);
        }
        out.push(b')');
        spans[slot].1 = out.len();
    }
}

#[derive(Clone, Copy, Debug)]
enum Position {
    Statement,
    Condition,
    Count,
}

/// SHA-256 of a subtree's canonical serialization.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalId(pub [u8; 32]);

impl CanonicalId {
    pub fn of_bytes(bytes: &[u8]) -> CanonicalId {
        let digest = Sha256::digest(bytes);
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        CanonicalId(out)
    }

    pub fn to_hex(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for CanonicalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for CanonicalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CanonicalId({})", &self.to_string()[..12])
    }
}

impl FromStr for CanonicalId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || !s.is_ascii() {
            return Err(format!("bad digest length in {s:?}"));
        }
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|e| format!("bad digest {s:?}: {e}"))?;
        }
        Ok(CanonicalId(out))
    }
}

pub fn canonical_id(ast: &Ast) -> CanonicalId {
    CanonicalId::of_bytes(&ast.canonical_bytes())
}

/// Every statement-position subtree in pre-order, paired with its id.
/// The first entry is the tree itself when the root is a statement.
/// Ids of every node (conditions and literals included) in pre-order.
pub fn node_ids(ast: &Ast) -> Vec<CanonicalId> {
    let mut bytes = Vec::new();
    let mut spans = Vec::new();
    ast.write_canonical(&mut bytes, &mut spans);
    spans
        .into_iter()
        .map(|(s, e)| CanonicalId::of_bytes(&bytes[s..e]))
        .collect()
}

pub fn subtrees(ast: &Ast) -> Vec<(&Ast, CanonicalId)> {
    // Each subtree's serialization is a contiguous slice of the root's.
    let mut bytes = Vec::new();
    let mut spans = Vec::new();
    ast.write_canonical(&mut bytes, &mut spans);
    let mut out = Vec::new();
    let mut index = 0;
    ast.walk(&mut |node| {
        if node.kind.is_statement() {
            let (s, e) = spans[index];
            out.push((node, CanonicalId::of_bytes(&bytes[s..e])));
        }
        index += 1;
    });
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unresolved call `{name}()` at {line}:{col}")]
    UnresolvedCall { name: String, line: usize, col: usize },
    #[error("repeat count {count} at {line}:{col} outside 1..={max}", max = MAX_REPEAT)]
    RepeatCount { count: i64, line: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    LBrace,
    RBrace,
    LParen,
    RParen,
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        if c == '\n' {
            line += 1;
            col = 1;
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let single = match c {
            '{' => Some(Tok::LBrace),
            '}' => Some(Tok::RBrace),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Token { tok, line: tl, col: tc });
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            col += i - start;
            let value = s.parse::<i64>().map_err(|_| ParseError::Syntax {
                line: tl,
                col: tc,
                msg: format!("integer literal {s} too large"),
            })?;
            out.push(Token {
                tok: Tok::Int(value),
                line: tl,
                col: tc,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            out.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                line: tl,
                col: tc,
            });
            continue;
        }
        return Err(ParseError::Syntax {
            line: tl,
            col: tc,
            msg: format!("unexpected character {c:?}"),
        });
    }
    out.push(Token { tok: Tok::Eof, line, col });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    calls: Vec<(String, usize, usize)>,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, t: &Token, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax {
            line: t.line,
            col: t.col,
            msg: msg.into(),
        })
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<Token, ParseError> {
        let t = self.next();
        if t.tok == want {
            Ok(t)
        } else {
            self.err(&t, format!("expected {what}, found {}", describe(&t.tok)))
        }
    }

    fn program(&mut self) -> Result<Ast, ParseError> {
        let mut items = Vec::new();
        let mut names: Vec<String> = Vec::new();
        while matches!(&self.peek().tok, Tok::Ident(s) if s == "def") {
            let def_tok = self.next();
            let name_tok = self.next();
            let name = match &name_tok.tok {
                Tok::Ident(s) if is_user_ident(s) => s.clone(),
                other => {
                    return self.err(&name_tok, format!("expected method name, found {}", describe(other)))
                }
            };
            if names.contains(&name) {
                return self.err(&def_tok, format!("method `{name}` defined twice"));
            }
            names.push(name.clone());
            let body = self.block()?;
            items.push(Ast::def(&name, body));
        }
        while self.peek().tok != Tok::Eof {
            items.push(self.stmt()?);
        }
        for (name, line, col) in &self.calls {
            if !names.contains(name) {
                return Err(ParseError::UnresolvedCall {
                    name: name.clone(),
                    line: *line,
                    col: *col,
                });
            }
        }
        Ok(match items.len() {
            0 => Ast::empty(),
            1 => items.pop().unwrap(),
            _ => Ast::seq(items),
        })
    }

    fn block(&mut self) -> Result<Ast, ParseError> {
        self.expect(Tok::LBrace, "`{`")?;
        let mut stmts = Vec::new();
        loop {
            match &self.peek().tok {
                Tok::RBrace => {
                    self.next();
                    break;
                }
                Tok::Eof => {
                    let t = self.peek().clone();
                    return self.err(&t, "unterminated block, expected `}`");
                }
                _ => stmts.push(self.stmt()?),
            }
        }
        Ok(Ast::block(stmts))
    }

    fn stmt(&mut self) -> Result<Ast, ParseError> {
        let t = self.next();
        let word = match &t.tok {
            Tok::Ident(s) => s.clone(),
            other => return self.err(&t, format!("expected statement, found {}", describe(other))),
        };
        if let Some(kind) = PRIMITIVES.iter().find(|k| k.keyword() == Some(word.as_str())) {
            return Ok(Ast::leaf(kind.clone()));
        }
        match word.as_str() {
            "repeat" => {
                self.expect(Tok::LParen, "`(`")?;
                let nt = self.next();
                let count = match nt.tok {
                    Tok::Int(n) => n,
                    ref other => return self.err(&nt, format!("expected repeat count, found {}", describe(other))),
                };
                if !(1..=i64::from(MAX_REPEAT)).contains(&count) {
                    return Err(ParseError::RepeatCount {
                        count,
                        line: nt.line,
                        col: nt.col,
                    });
                }
                self.expect(Tok::RParen, "`)`")?;
                let body = self.block()?;
                Ok(Ast::repeat(count as u8, body))
            }
            "while" => {
                let cond = self.paren_cond()?;
                Ok(Ast::while_loop(cond, self.block()?))
            }
            "if" => {
                let cond = self.paren_cond()?;
                let then = self.block()?;
                if matches!(&self.peek().tok, Tok::Ident(s) if s == "else") {
                    self.next();
                    let otherwise = self.block()?;
                    Ok(Ast::if_else(cond, then, otherwise))
                } else {
                    Ok(Ast::if_then(cond, then))
                }
            }
            "def" => self.err(&t, "method definitions must precede statements"),
            _ if is_user_ident(&word) && !ATOMS.iter().any(|a| a.keyword() == Some(word.as_str())) => {
                self.expect(Tok::LParen, "`(` after method name")?;
                self.expect(Tok::RParen, "`)`")?;
                self.calls.push((word.clone(), t.line, t.col));
                Ok(Ast::call(&word))
            }
            _ => self.err(&t, format!("unexpected `{word}`")),
        }
    }

    fn paren_cond(&mut self) -> Result<Ast, ParseError> {
        self.expect(Tok::LParen, "`(`")?;
        let mut t = self.next();
        let mut negate = false;
        if matches!(&t.tok, Tok::Ident(s) if s == "not") {
            negate = true;
            t = self.next();
        }
        let atom = match &t.tok {
            Tok::Ident(s) => ATOMS.iter().find(|a| a.keyword() == Some(s.as_str())).cloned(),
            _ => None,
        };
        let Some(atom) = atom else {
            return self.err(&t, format!("expected condition, found {}", describe(&t.tok)));
        };
        self.expect(Tok::RParen, "`)`")?;
        let atom = Ast::leaf(atom);
        Ok(if negate { Ast::not(atom) } else { atom })
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Int(n) => format!("`{n}`"),
        Tok::LBrace => "`{`".into(),
        Tok::RBrace => "`}`".into(),
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::Eof => "end of input".into(),
    }
}

fn is_user_ident(s: &str) -> bool {
    !RESERVED.contains(&s) && !PRIMITIVES.iter().any(|k| k.keyword() == Some(s))
}

pub fn parse(text: &str) -> Result<Ast, ParseError> {
    let toks = tokenize(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        calls: Vec::new(),
    };
    p.program()
}

/// Canonical source text. `parse(&pretty(t)) == t` for parser-built trees.
pub fn pretty(ast: &Ast) -> String {
    let mut lines = Vec::new();
    emit_stmts(ast, 0, &mut lines);
    lines.join("\n")
}

fn emit_stmts(ast: &Ast, indent: usize, out: &mut Vec<String>) {
    match &ast.kind {
        NodeKind::Seq => {
            for c in &ast.children {
                emit_stmts(c, indent, out);
            }
        }
        NodeKind::Empty => {}
        _ => emit_stmt(ast, indent, out),
    }
}

fn emit_stmt(ast: &Ast, indent: usize, out: &mut Vec<String>) {
    let pad = "  ".repeat(indent);
    let kind = &ast.kind;
    if let Some(kw) = kind.keyword() {
        out.push(format!("{pad}{kw}"));
        return;
    }
    let block = |head: String, body: &Ast, out: &mut Vec<String>| {
        out.push(format!("{pad}{head}{{"));
        emit_stmts(body, indent + 1, out);
        out.push(format!("{pad}}}"));
    };
    match kind {
        NodeKind::Call(name) => out.push(format!("{pad}{name}()")),
        NodeKind::Def(name) => block(format!("def {name} "), &ast.children[0], out),
        NodeKind::Repeat => {
            let count = match ast.children[0].kind {
                NodeKind::Num(k) => k,
                _ => 0,
            };
            block(format!("repeat({count})"), &ast.children[1], out)
        }
        NodeKind::While => block(format!("while({})", cond_text(&ast.children[0])), &ast.children[1], out),
        NodeKind::If => block(format!("if({})", cond_text(&ast.children[0])), &ast.children[1], out),
        NodeKind::IfElse => {
            block(format!("if({})", cond_text(&ast.children[0])), &ast.children[1], out);
            let close = out.pop().unwrap();
            out.push(format!("{close} else {{"));
            emit_stmts(&ast.children[2], indent + 1, out);
            out.push(format!("{pad}}}"));
        }
        // Not statements; printed only so that malformed trees still render.
        other => out.push(format!("{pad}# {}", other.tag())),
    }
}

fn cond_text(cond: &Ast) -> String {
    match &cond.kind {
        NodeKind::Not => format!("not {}", cond_text(&cond.children[0])),
        k => k.keyword().unwrap_or("?").to_string(),
    }
}

/// Replaces every call with its method body, recursively, and drops the
/// definitions. Calls nested deeper than `depth_cap` become `EMPTY`.
pub fn inline_calls(ast: &Ast, depth_cap: usize) -> Ast {
    let mut defs = BTreeMap::new();
    let roots: Vec<&Ast> = match &ast.kind {
        NodeKind::Seq => ast.children.iter().collect(),
        _ => vec![ast],
    };
    for item in &roots {
        if let NodeKind::Def(name) = &item.kind {
            defs.insert(name.clone(), &item.children[0]);
        }
    }
    if defs.is_empty() {
        return expand(ast, &defs, 0, depth_cap);
    }
    let mut body: Vec<Ast> = roots
        .into_iter()
        .filter(|n| !matches!(n.kind, NodeKind::Def(_)))
        .map(|n| expand(n, &defs, 0, depth_cap))
        .collect();
    match body.len() {
        0 => Ast::empty(),
        1 => body.pop().unwrap(),
        _ => Ast::seq(body),
    }
}

fn expand(ast: &Ast, defs: &BTreeMap<String, &Ast>, depth: usize, cap: usize) -> Ast {
    match &ast.kind {
        NodeKind::Call(name) => {
            let Some(body) = defs.get(name) else {
                return Ast::empty();
            };
            if depth >= cap {
                return Ast::empty();
            }
            let body = if body.kind == NodeKind::Seq && body.children.len() == 1 {
                &body.children[0]
            } else {
                body
            };
            expand(body, defs, depth + 1, cap)
        }
        _ => Ast {
            kind: ast.kind.clone(),
            children: ast
                .children
                .iter()
                .map(|c| expand(c, defs, depth, cap))
                .collect(),
        },
    }
}

/// Folds every `SEQ` into a right-leaning chain of binary `SEQ` nodes,
/// collapsing single-statement sequences to the statement.
pub fn binarize(ast: &Ast) -> Ast {
    let children: Vec<Ast> = ast.children.iter().map(binarize).collect();
    if ast.kind != NodeKind::Seq {
        return Ast {
            kind: ast.kind.clone(),
            children,
        };
    }
    fold_seq(children)
}

fn fold_seq(mut items: Vec<Ast>) -> Ast {
    match items.len() {
        0 => Ast::empty(),
        1 => items.pop().unwrap(),
        2 => Ast::seq(items),
        _ => {
            let rest = items.split_off(1);
            let head = items.pop().unwrap();
            Ast::seq(vec![head, fold_seq(rest)])
        }
    }
}

/// Inlined and binarized: the tree every model consumes.
pub fn modeling_tree(surface: &Ast) -> Ast {
    binarize(&inline_calls(surface, DEFAULT_INLINE_DEPTH))
}

/// 1 + number of loops and conditionals.
pub fn cyclomatic_complexity(ast: &Ast) -> usize {
    1 + ast.count_kind(NodeKind::is_decision)
}
