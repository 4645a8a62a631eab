//! The `.mps` model description language.
//!
//! A line-oriented format for species, habitat graph, per-volume initial
//! counts and rules, and run configuration:
//!
//! ```text
//! # two coupled patches
//! species A buffered
//! species X
//! species Y
//! node p0
//! node p1
//! edge p0 p1
//! volume p0 {
//!   init A=200 X=1000 Y=1000
//!   rule r1: A + X -> 2 X @ 0.1
//!   rule r2: X + Y -> 2 Y @ 0.01
//!   rule r3: Y -> 0 @ 10
//!   rule d_p1: Y -> Y @ 1 target p1
//! }
//! config t_end=10 seed=42 engine=tau
//! ```
//!
//! `0` is the empty multiset. `#` starts a comment. Names may be used
//! before they are declared. Parsing reports every problem it can find,
//! each with a line, a column inside the offending token and a code.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::model::{
    Count, Engine, MetapopulationModel, ModelError, ReactionRule, SimulationConfig, SpeciesTable,
    TopologyGraph, Volume,
};
use crate::topology::{Scenario, TopologyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagCode {
    Syntax,
    BadNumber,
    UnknownSpecies,
    UnknownNode,
    DuplicateId,
    NegativeConstant,
    NegativeCount,
    MalformedStoichiometry,
    SelfEdge,
    MalformedDispersal,
    NotAdjacent,
    UnclosedBlock,
    UnknownConfigKey,
}

impl DiagCode {
    pub fn as_str(self) -> &'static str {
        match self {
            DiagCode::Syntax => "E001",
            DiagCode::BadNumber => "E002",
            DiagCode::UnknownSpecies => "E003",
            DiagCode::UnknownNode => "E004",
            DiagCode::DuplicateId => "E005",
            DiagCode::NegativeConstant => "E006",
            DiagCode::NegativeCount => "E007",
            DiagCode::MalformedStoichiometry => "E008",
            DiagCode::SelfEdge => "E009",
            DiagCode::MalformedDispersal => "E010",
            DiagCode::NotAdjacent => "E011",
            DiagCode::UnclosedBlock => "E012",
            DiagCode::UnknownConfigKey => "E013",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub code: DiagCode,
    /// 1-based line.
    pub line: usize,
    /// 1-based column, in characters.
    pub column: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}: error[{}]: {}",
            self.line,
            self.column,
            self.code.as_str(),
            self.message
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesDecl {
    pub name: String,
    pub buffered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDecl {
    pub a: String,
    pub b: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleStmt {
    pub id: String,
    /// Species and coefficient, merged and in species declaration order.
    pub lhs: Vec<(String, u32)>,
    pub rhs: Vec<(String, u32)>,
    pub constant: f64,
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeBlock {
    pub name: String,
    pub area: f64,
    /// Initial counts in species declaration order; unlisted species start at 0.
    pub init: Vec<(String, Count)>,
    pub rules: Vec<RuleStmt>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigBlock {
    pub t_end: Option<f64>,
    pub seed: Option<u64>,
    pub engine: Option<Engine>,
    pub epsilon: Option<f64>,
    pub critical_threshold: Option<u64>,
    pub ssa_fallback_steps: Option<usize>,
    pub record_interval: Option<f64>,
}

impl ConfigBlock {
    pub fn is_empty(&self) -> bool {
        *self == ConfigBlock::default()
    }

    /// Overrides the fields of `base` that this block sets.
    pub fn apply(&self, mut base: SimulationConfig) -> SimulationConfig {
        if let Some(v) = self.t_end {
            base.t_end = v;
        }
        if let Some(v) = self.seed {
            base.seed = v;
        }
        if let Some(v) = self.engine {
            base.engine = v;
        }
        if let Some(v) = self.epsilon {
            base.epsilon = v;
        }
        if let Some(v) = self.critical_threshold {
            base.critical_threshold = v;
        }
        if let Some(v) = self.ssa_fallback_steps {
            base.ssa_fallback_steps = v;
        }
        if let Some(v) = self.record_interval {
            base.record_interval = v;
        }
        base
    }

    pub fn from_config(config: &SimulationConfig) -> Self {
        ConfigBlock {
            t_end: Some(config.t_end),
            seed: Some(config.seed),
            engine: Some(config.engine),
            epsilon: Some(config.epsilon),
            critical_threshold: Some(config.critical_threshold),
            ssa_fallback_steps: Some(config.ssa_fallback_steps),
            record_interval: Some(config.record_interval),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelDocument {
    pub species: Vec<SpeciesDecl>,
    pub nodes: Vec<String>,
    pub edges: Vec<EdgeDecl>,
    pub volumes: Vec<VolumeBlock>,
    pub config: ConfigBlock,
}

const HEADER: &str = "# metasim model\n";

// ---------------------------------------------------------------- lexing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    LBrace,
    RBrace,
    Plus,
    Colon,
    Eq,
    At,
    Arrow,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    col: usize,
}

impl Token {
    fn word(&self) -> Option<&str> {
        match &self.tok {
            Tok::Word(w) => Some(w),
            _ => None,
        }
    }

    fn describe(&self) -> String {
        match &self.tok {
            Tok::Word(w) => format!("`{w}`"),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Eq => "`=`".into(),
            Tok::At => "`@`".into(),
            Tok::Arrow => "`->`".into(),
        }
    }
}

fn tokenize(line: &str) -> Vec<Token> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '#' {
            break;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let col = i + 1;
        let punct = match c {
            '{' => Some(Tok::LBrace),
            '}' => Some(Tok::RBrace),
            '+' => Some(Tok::Plus),
            ':' => Some(Tok::Colon),
            '=' => Some(Tok::Eq),
            '@' => Some(Tok::At),
            '-' if chars.get(i + 1) == Some(&'>') => {
                i += 1;
                Some(Tok::Arrow)
            }
            _ => None,
        };
        if let Some(tok) = punct {
            out.push(Token { tok, col });
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() {
            let c = chars[i];
            let arrow = c == '-' && chars.get(i + 1) == Some(&'>');
            // `+` inside a number exponent (`1e+3`) stays in the word.
            let exponent_sign = c == '+' && i > start && matches!(chars[i - 1], 'e' | 'E') && chars[start].is_ascii_digit();
            if c.is_whitespace() || arrow || (matches!(c, '{' | '}' | '+' | ':' | '=' | '@' | '#') && !exponent_sign) {
                break;
            }
            i += 1;
        }
        out.push(Token {
            tok: Tok::Word(chars[start..i].iter().collect()),
            col,
        });
    }
    out
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

// --------------------------------------------------------------- parsing

#[derive(Debug, Clone)]
struct Named {
    name: String,
    line: usize,
    col: usize,
}

struct RawRule {
    id: Named,
    lhs: Vec<(Named, u32)>,
    rhs: Vec<(Named, u32)>,
    constant: f64,
    target: Option<Named>,
}

struct RawVolume {
    name: Named,
    area: f64,
    init: Vec<(Named, Count)>,
    rules: Vec<RawRule>,
}

#[derive(Default)]
struct Raw {
    species: Vec<(Named, bool)>,
    nodes: Vec<Named>,
    edges: Vec<(Named, Named, f64)>,
    volumes: Vec<RawVolume>,
    config: ConfigBlock,
}

struct Parser {
    diags: Vec<Diagnostic>,
    raw: Raw,
    open: Option<(usize, usize)>,
}

struct Line<'a> {
    no: usize,
    toks: &'a [Token],
    pos: usize,
}

impl<'a> Line<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<&'a Token> {
        let t = self.toks.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    /// Column of the current token, or of the last token when at the end.
    fn col(&self) -> usize {
        self.toks
            .get(self.pos)
            .or(self.toks.last())
            .map_or(1, |t| t.col)
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek().map(|t| &t.tok) == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }
}

type Fail = ();

impl Parser {
    fn diag(&mut self, code: DiagCode, line: usize, column: usize, message: impl Into<String>) {
        self.diags.push(Diagnostic {
            code,
            line,
            column,
            message: message.into(),
        });
    }

    fn expect_word(&mut self, l: &mut Line<'_>, what: &str) -> Result<Named, Fail> {
        match l.peek() {
            Some(t) if t.word().is_some() => {
                l.pos += 1;
                Ok(Named {
                    name: t.word().unwrap().to_string(),
                    line: l.no,
                    col: t.col,
                })
            }
            Some(t) => {
                let msg = format!("expected {what}, found {}", t.describe());
                self.diag(DiagCode::Syntax, l.no, t.col, msg);
                Err(())
            }
            None => {
                self.diag(DiagCode::Syntax, l.no, l.col(), format!("expected {what} at end of line"));
                Err(())
            }
        }
    }

    fn expect_ident(&mut self, l: &mut Line<'_>, what: &str) -> Result<Named, Fail> {
        let n = self.expect_word(l, what)?;
        if !is_ident(&n.name) {
            self.diag(DiagCode::Syntax, n.line, n.col, format!("`{}` is not a valid {what}", n.name));
            return Err(());
        }
        Ok(n)
    }

    fn expect(&mut self, l: &mut Line<'_>, tok: Tok, what: &str) -> Result<(), Fail> {
        if l.eat(&tok) {
            return Ok(());
        }
        let found = l.peek().map_or("end of line".to_string(), |t| t.describe());
        self.diag(DiagCode::Syntax, l.no, l.col(), format!("expected {what}, found {found}"));
        Err(())
    }

    fn expect_end(&mut self, l: &mut Line<'_>) -> Result<(), Fail> {
        if let Some(t) = l.peek() {
            let msg = format!("unexpected {} at end of statement", t.describe());
            self.diag(DiagCode::Syntax, l.no, t.col, msg);
            return Err(());
        }
        Ok(())
    }

    fn real(&mut self, n: &Named) -> Result<f64, Fail> {
        match n.name.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => {
                self.diag(DiagCode::BadNumber, n.line, n.col, format!("`{}` is not a finite number", n.name));
                Err(())
            }
        }
    }

    fn integer<T: std::str::FromStr>(&mut self, n: &Named) -> Result<T, Fail> {
        n.name.parse::<T>().map_err(|_| {
            self.diag(DiagCode::BadNumber, n.line, n.col, format!("`{}` is not a valid integer", n.name));
        })
    }

    fn statement(&mut self, l: &mut Line<'_>) -> Result<(), Fail> {
        let first = l.next().expect("non-empty line");
        let keyword = first.word().unwrap_or("");
        let in_block = self.open.is_some();
        match (keyword, &first.tok) {
            (_, Tok::RBrace) if in_block => {
                self.open = None;
                self.expect_end(l)
            }
            ("init", _) if in_block => self.init(l),
            ("rule", _) if in_block => self.rule(l),
            ("area", _) if in_block => {
                let v = self.expect_word(l, "area")?;
                let area = self.real(&v)?;
                if area <= 0.0 {
                    self.diag(DiagCode::BadNumber, v.line, v.col, "area must be positive");
                    return Err(());
                }
                self.raw.volumes.last_mut().unwrap().area = area;
                self.expect_end(l)
            }
            ("species", _) if !in_block => {
                let name = self.expect_ident(l, "species name")?;
                let mut buffered = false;
                if let Some(t) = l.peek() {
                    if t.word() == Some("buffered") {
                        l.pos += 1;
                        buffered = true;
                    }
                }
                self.expect_end(l)?;
                self.raw.species.push((name, buffered));
                Ok(())
            }
            ("node", _) if !in_block => {
                let name = self.expect_ident(l, "node name")?;
                self.expect_end(l)?;
                self.raw.nodes.push(name);
                Ok(())
            }
            ("edge", _) if !in_block => {
                let a = self.expect_ident(l, "node name")?;
                let b = self.expect_ident(l, "node name")?;
                let mut weight = 1.0;
                if l.peek().and_then(Token::word) == Some("weight") {
                    l.pos += 1;
                    let w = self.expect_word(l, "edge weight")?;
                    weight = self.real(&w)?;
                    if weight <= 0.0 {
                        self.diag(DiagCode::BadNumber, w.line, w.col, "edge weight must be positive");
                        return Err(());
                    }
                }
                self.expect_end(l)?;
                if a.name == b.name {
                    self.diag(DiagCode::SelfEdge, b.line, b.col, format!("self-edge not allowed on `{}`", a.name));
                    return Err(());
                }
                self.raw.edges.push((a, b, weight));
                Ok(())
            }
            ("volume", _) if !in_block => {
                let name = self.expect_ident(l, "node name")?;
                self.expect(l, Tok::LBrace, "`{`")?;
                self.expect_end(l)?;
                self.open = Some((name.line, name.col));
                self.raw.volumes.push(RawVolume {
                    name,
                    area: 1.0,
                    init: Vec::new(),
                    rules: Vec::new(),
                });
                Ok(())
            }
            ("config", _) if !in_block => self.config(l),
            ("volume" | "species" | "node" | "edge" | "config", _) => {
                self.diag(DiagCode::UnclosedBlock, l.no, first.col, format!("`{keyword}` inside a volume block (missing `}}`?)"));
                Err(())
            }
            ("init" | "rule" | "area", _) => {
                self.diag(DiagCode::Syntax, l.no, first.col, format!("`{keyword}` is only allowed inside a volume block"));
                Err(())
            }
            _ => {
                let msg = format!("unexpected {}", first.describe());
                self.diag(DiagCode::Syntax, l.no, first.col, msg);
                Err(())
            }
        }
    }

    fn init(&mut self, l: &mut Line<'_>) -> Result<(), Fail> {
        let mut entries = Vec::new();
        if l.peek().is_none() {
            self.diag(DiagCode::Syntax, l.no, l.col(), "expected `<species>=<count>` after `init`");
            return Err(());
        }
        while l.peek().is_some() {
            let name = self.expect_ident(l, "species name")?;
            self.expect(l, Tok::Eq, "`=`")?;
            let v = self.expect_word(l, "count")?;
            let count: i128 = self.integer(&v)?;
            if count < 0 {
                self.diag(DiagCode::NegativeCount, v.line, v.col, "initial counts must be non-negative");
                return Err(());
            }
            let Ok(count) = Count::try_from(count) else {
                self.diag(DiagCode::BadNumber, v.line, v.col, "count out of range");
                return Err(());
            };
            entries.push((name, count));
        }
        self.raw.volumes.last_mut().unwrap().init.extend(entries);
        Ok(())
    }

    fn terms(&mut self, l: &mut Line<'_>, stop: &Tok) -> Result<Vec<(Named, u32)>, Fail> {
        let mut out = Vec::new();
        // `0` alone is the empty side.
        if let Some(t) = l.peek() {
            if t.word() == Some("0") && l.toks.get(l.pos + 1).is_none_or(|n| &n.tok == stop || n.word() == Some("target")) {
                l.pos += 1;
                return Ok(out);
            }
        }
        loop {
            let first = self.expect_word(l, "species term")?;
            let (coeff, species) = if first.name.chars().next().is_some_and(|c| c.is_ascii_digit()) {
                let Ok(k) = first.name.parse::<u32>() else {
                    self.diag(DiagCode::MalformedStoichiometry, first.line, first.col, format!("`{}` is not a valid coefficient", first.name));
                    return Err(());
                };
                if k == 0 {
                    self.diag(DiagCode::MalformedStoichiometry, first.line, first.col, "coefficient must be positive");
                    return Err(());
                }
                (k, self.expect_word(l, "species name")?)
            } else {
                (1, first)
            };
            if !is_ident(&species.name) {
                self.diag(DiagCode::MalformedStoichiometry, species.line, species.col, format!("`{}` is not a species term", species.name));
                return Err(());
            }
            out.push((species, coeff));
            if !l.eat(&Tok::Plus) {
                return Ok(out);
            }
        }
    }

    fn rule(&mut self, l: &mut Line<'_>) -> Result<(), Fail> {
        let id = self.expect_ident(l, "rule id")?;
        self.expect(l, Tok::Colon, "`:`")?;
        let lhs = self.terms(l, &Tok::Arrow)?;
        self.expect(l, Tok::Arrow, "`->`")?;
        let rhs = self.terms(l, &Tok::At)?;
        self.expect(l, Tok::At, "`@`")?;
        let c = self.expect_word(l, "stochastic constant")?;
        let constant = self.real(&c)?;
        if constant < 0.0 {
            self.diag(DiagCode::NegativeConstant, c.line, c.col, "stochastic constants must be non-negative");
            return Err(());
        }
        let mut target = None;
        if let Some(t) = l.peek() {
            if t.word() == Some("target") {
                l.pos += 1;
                target = Some(self.expect_ident(l, "target node")?);
            }
        }
        self.expect_end(l)?;
        self.raw.volumes.last_mut().unwrap().rules.push(RawRule {
            id,
            lhs,
            rhs,
            constant,
            target,
        });
        Ok(())
    }

    fn config(&mut self, l: &mut Line<'_>) -> Result<(), Fail> {
        while l.peek().is_some() {
            let key = self.expect_word(l, "config key")?;
            self.expect(l, Tok::Eq, "`=`")?;
            let v = self.expect_word(l, "config value")?;
            match key.name.as_str() {
                "t_end" => self.raw.config.t_end = Some(self.real(&v)?),
                "seed" => self.raw.config.seed = Some(self.integer(&v)?),
                "engine" => match v.name.parse::<Engine>() {
                    Ok(e) => self.raw.config.engine = Some(e),
                    Err(_) => {
                        self.diag(DiagCode::Syntax, v.line, v.col, format!("unknown engine `{}` (expected ssa or tau)", v.name));
                        return Err(());
                    }
                },
                "epsilon" => self.raw.config.epsilon = Some(self.real(&v)?),
                "critical_threshold" => self.raw.config.critical_threshold = Some(self.integer(&v)?),
                "ssa_fallback_steps" => self.raw.config.ssa_fallback_steps = Some(self.integer(&v)?),
                "record_interval" => self.raw.config.record_interval = Some(self.real(&v)?),
                other => {
                    let msg = format!("unknown config key `{other}`");
                    self.diag(DiagCode::UnknownConfigKey, key.line, key.col, msg);
                    return Err(());
                }
            }
        }
        Ok(())
    }
}

/// Parses `.mps` text. On failure every diagnostic found is returned,
/// sorted by position.
pub fn parse(text: &str) -> Result<ModelDocument, Vec<Diagnostic>> {
    let mut p = Parser {
        diags: Vec::new(),
        raw: Raw::default(),
        open: None,
    };
    for (i, line) in text.lines().enumerate() {
        let toks = tokenize(line);
        if toks.is_empty() {
            continue;
        }
        let mut l = Line {
            no: i + 1,
            toks: &toks,
            pos: 0,
        };
        let _ = p.statement(&mut l);
    }
    if let Some((line, col)) = p.open {
        p.diag(DiagCode::UnclosedBlock, line, col, "volume block is never closed");
    }
    let Parser { mut diags, raw, .. } = p;
    let doc = resolve(raw, &mut diags);
    if diags.is_empty() {
        Ok(doc)
    } else {
        diags.sort_by_key(|d| (d.line, d.column));
        Err(diags)
    }
}

fn resolve(raw: Raw, diags: &mut Vec<Diagnostic>) -> ModelDocument {
    let mut push = |code, n: &Named, message: String| {
        diags.push(Diagnostic {
            code,
            line: n.line,
            column: n.col,
            message,
        })
    };

    let mut species_order: BTreeMap<String, usize> = BTreeMap::new();
    let mut species = Vec::new();
    for (n, buffered) in &raw.species {
        if species_order.contains_key(&n.name) {
            push(DiagCode::DuplicateId, n, format!("species `{}` declared twice", n.name));
            continue;
        }
        species_order.insert(n.name.clone(), species.len());
        species.push(SpeciesDecl {
            name: n.name.clone(),
            buffered: *buffered,
        });
    }

    let mut node_set: BTreeSet<String> = BTreeSet::new();
    let mut nodes = Vec::new();
    for n in &raw.nodes {
        if !node_set.insert(n.name.clone()) {
            push(DiagCode::DuplicateId, n, format!("node `{}` declared twice", n.name));
            continue;
        }
        nodes.push(n.name.clone());
    }

    let mut edge_set: BTreeSet<(String, String)> = BTreeSet::new();
    let mut edges = Vec::new();
    for (a, b, weight) in &raw.edges {
        let mut ok = true;
        for n in [a, b] {
            if !node_set.contains(&n.name) {
                push(DiagCode::UnknownNode, n, format!("unknown node `{}`", n.name));
                ok = false;
            }
        }
        let key = if a.name < b.name {
            (a.name.clone(), b.name.clone())
        } else {
            (b.name.clone(), a.name.clone())
        };
        if ok && !edge_set.insert(key) {
            push(DiagCode::DuplicateId, a, format!("edge {} - {} declared twice", a.name, b.name));
            continue;
        }
        if ok {
            edges.push(EdgeDecl {
                a: a.name.clone(),
                b: b.name.clone(),
                weight: *weight,
            });
        }
    }

    let terms = |side: &[(Named, u32)], push: &mut dyn FnMut(DiagCode, &Named, String)| {
        let mut merged: BTreeMap<usize, (String, u32)> = BTreeMap::new();
        for (n, k) in side {
            match species_order.get(&n.name) {
                Some(&i) => merged.entry(i).or_insert((n.name.clone(), 0)).1 += k,
                None => push(DiagCode::UnknownSpecies, n, format!("unknown species `{}`", n.name)),
            }
        }
        merged.into_values().collect::<Vec<_>>()
    };

    let mut seen_volumes: BTreeSet<String> = BTreeSet::new();
    let mut volumes = Vec::new();
    for rv in &raw.volumes {
        if !node_set.contains(&rv.name.name) {
            push(DiagCode::UnknownNode, &rv.name, format!("volume `{}` is not a declared node", rv.name.name));
        }
        if !seen_volumes.insert(rv.name.name.clone()) {
            push(DiagCode::DuplicateId, &rv.name, format!("volume `{}` defined twice", rv.name.name));
        }
        let mut init: BTreeMap<usize, (String, Count)> = BTreeMap::new();
        for (n, c) in &rv.init {
            match species_order.get(&n.name) {
                Some(&i) => {
                    if init.insert(i, (n.name.clone(), *c)).is_some() {
                        push(DiagCode::DuplicateId, n, format!("species `{}` initialized twice", n.name));
                    }
                }
                None => push(DiagCode::UnknownSpecies, n, format!("unknown species `{}`", n.name)),
            }
        }
        let mut rule_ids: BTreeSet<String> = BTreeSet::new();
        let mut rules = Vec::new();
        for rr in &rv.rules {
            if !rule_ids.insert(rr.id.name.clone()) {
                push(DiagCode::DuplicateId, &rr.id, format!("rule `{}` defined twice in `{}`", rr.id.name, rv.name.name));
            }
            let lhs = terms(&rr.lhs, &mut push);
            let rhs = terms(&rr.rhs, &mut push);
            if let Some(t) = &rr.target {
                if !node_set.contains(&t.name) {
                    push(DiagCode::UnknownNode, t, format!("unknown target node `{}`", t.name));
                } else {
                    let adjacent = edge_set.contains(&(rv.name.name.clone().min(t.name.clone()), rv.name.name.clone().max(t.name.clone())));
                    if !adjacent {
                        push(DiagCode::NotAdjacent, t, format!("target `{}` is not adjacent to `{}`", t.name, rv.name.name));
                    }
                }
                let single = lhs.len() == 1 && lhs[0].1 == 1 && lhs == rhs;
                if !single && rr.lhs.len() + rr.rhs.len() > 0 {
                    push(DiagCode::MalformedDispersal, &rr.id, "dispersal rules must have the form `S -> S` for one species".into());
                } else if !single {
                    push(DiagCode::MalformedDispersal, &rr.id, "dispersal rules need one species on each side".into());
                }
            }
            rules.push(RuleStmt {
                id: rr.id.name.clone(),
                lhs,
                rhs,
                constant: rr.constant,
                target: rr.target.as_ref().map(|t| t.name.clone()),
            });
        }
        volumes.push(VolumeBlock {
            name: rv.name.name.clone(),
            area: rv.area,
            init: init.into_values().collect(),
            rules,
        });
    }

    ModelDocument {
        species,
        nodes,
        edges,
        volumes,
        config: raw.config,
    }
}

// --------------------------------------------------------- serialization

fn fmt_real(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn fmt_side(side: &[(String, u32)]) -> String {
    if side.is_empty() {
        return "0".into();
    }
    side.iter()
        .map(|(s, k)| if *k == 1 { s.clone() } else { format!("{k} {s}") })
        .collect::<Vec<_>>()
        .join(" + ")
}

/// Canonical text: header comment, declarations in document order, weights
/// and areas equal to 1 omitted, LF line endings.
pub fn serialize(doc: &ModelDocument) -> String {
    let mut out = String::from(HEADER);
    for s in &doc.species {
        out += &format!("species {}{}\n", s.name, if s.buffered { " buffered" } else { "" });
    }
    for n in &doc.nodes {
        out += &format!("node {n}\n");
    }
    for e in &doc.edges {
        out += &format!("edge {} {}", e.a, e.b);
        if e.weight != 1.0 {
            out += &format!(" weight {}", fmt_real(e.weight));
        }
        out.push('\n');
    }
    for v in &doc.volumes {
        out += &format!("volume {} {{\n", v.name);
        if v.area != 1.0 {
            out += &format!("  area {}\n", fmt_real(v.area));
        }
        if !v.init.is_empty() {
            out += "  init";
            for (s, c) in &v.init {
                out += &format!(" {s}={c}");
            }
            out.push('\n');
        }
        for r in &v.rules {
            out += &format!(
                "  rule {}: {} -> {} @ {}",
                r.id,
                fmt_side(&r.lhs),
                fmt_side(&r.rhs),
                fmt_real(r.constant)
            );
            if let Some(t) = &r.target {
                out += &format!(" target {t}");
            }
            out.push('\n');
        }
        out += "}\n";
    }
    let c = &doc.config;
    if !c.is_empty() {
        let mut line = String::from("config");
        if let Some(v) = c.t_end {
            let _ = write!(line, " t_end={}", fmt_real(v));
        }
        if let Some(v) = c.seed {
            let _ = write!(line, " seed={v}");
        }
        if let Some(v) = c.engine {
            let _ = write!(line, " engine={v}");
        }
        if let Some(v) = c.epsilon {
            let _ = write!(line, " epsilon={}", fmt_real(v));
        }
        if let Some(v) = c.critical_threshold {
            let _ = write!(line, " critical_threshold={v}");
        }
        if let Some(v) = c.ssa_fallback_steps {
            let _ = write!(line, " ssa_fallback_steps={v}");
        }
        if let Some(v) = c.record_interval {
            let _ = write!(line, " record_interval={}", fmt_real(v));
        }
        out += &line;
        out.push('\n');
    }
    out
}

// ------------------------------------------------------ model conversion

impl ModelDocument {
    /// Builds the simulation model. Nodes without a volume block become
    /// empty volumes with no rules.
    pub fn to_model(&self) -> Result<MetapopulationModel, ModelError> {
        let species = SpeciesTable::new(self.species.iter().map(|s| (s.name.clone(), s.buffered)))?;
        let node_index = |name: &str| {
            self.nodes
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| ModelError::Config(format!("unknown node `{name}`")))
        };
        let species_index = |name: &str| {
            species
                .index_of(name)
                .ok_or_else(|| ModelError::Config(format!("unknown species `{name}`")))
        };
        let mut graph = TopologyGraph::new(self.nodes.len());
        for e in &self.edges {
            graph.add_edge(node_index(&e.a)?, node_index(&e.b)?, e.weight)?;
        }
        let mut volumes: Vec<Volume> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| Volume::new(i, n.clone(), vec![0; species.len()]))
            .collect();
        for block in &self.volumes {
            let v = &mut volumes[node_index(&block.name)?];
            v.area = block.area;
            for (s, c) in &block.init {
                v.counts[species_index(s)?] = *c;
            }
            for r in &block.rules {
                let side = |terms: &[(String, u32)]| {
                    terms
                        .iter()
                        .map(|(s, k)| Ok((species_index(s)?, *k)))
                        .collect::<Result<Vec<_>, ModelError>>()
                };
                let rule = match &r.target {
                    Some(t) => {
                        let lhs = side(&r.lhs)?;
                        let s = lhs.first().map(|p| p.0).ok_or_else(|| {
                            ModelError::Config(format!("dispersal rule `{}` has no species", r.id))
                        })?;
                        ReactionRule::dispersal(r.id.clone(), s, r.constant, node_index(t)?)?
                    }
                    None => ReactionRule::internal(r.id.clone(), &side(&r.lhs)?, &side(&r.rhs)?, r.constant)?,
                };
                v.rules.push(rule);
            }
        }
        Ok(MetapopulationModel {
            species,
            graph,
            volumes,
            time: 0.0,
        })
    }

    /// Document describing `model`, with every initial count listed.
    pub fn from_model(model: &MetapopulationModel, config: Option<&SimulationConfig>) -> Self {
        let sp = |i: usize| model.species.name(i).to_string();
        let node = |i: usize| model.volumes.get(i).map_or_else(|| format!("n{i}"), |v| v.name.clone());
        let side = |terms: &[(usize, u32)]| terms.iter().map(|&(s, k)| (sp(s), k)).collect::<Vec<_>>();
        ModelDocument {
            species: model
                .species
                .iter()
                .map(|s| SpeciesDecl {
                    name: s.name.clone(),
                    buffered: s.buffered,
                })
                .collect(),
            nodes: model.volumes.iter().map(|v| v.name.clone()).collect(),
            edges: model
                .graph
                .edges
                .iter()
                .map(|(&(a, b), &w)| EdgeDecl {
                    a: node(a),
                    b: node(b),
                    weight: w,
                })
                .collect(),
            volumes: model
                .volumes
                .iter()
                .map(|v| VolumeBlock {
                    name: v.name.clone(),
                    area: v.area,
                    init: v.counts.iter().enumerate().map(|(s, &c)| (sp(s), c)).collect(),
                    rules: v
                        .rules
                        .iter()
                        .map(|r| RuleStmt {
                            id: r.id.clone(),
                            lhs: side(&r.reactants),
                            rhs: side(&r.products),
                            constant: r.constant,
                            target: r.target.map(node),
                        })
                        .collect(),
                })
                .collect(),
            config: config.map(ConfigBlock::from_config).unwrap_or_default(),
        }
    }
}

/// Document for a built-in scenario.
pub fn emit_scenario(scenario: &Scenario) -> Result<ModelDocument, TopologyError> {
    Ok(ModelDocument::from_model(&scenario.build()?, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{self, all_scenarios, migration_scenarios};

    const TWO_PATCH: &str = "\
species A buffered
species X
species Y
node p0
node p1
edge p0 p1
volume p0 {
  init A=200 X=1000 Y=1000
  rule r1: A + X -> 2 X @ 0.1
  rule r2: X + Y -> 2 Y @ 0.01
  rule r3: Y -> 0 @ 10
  rule d1: Y -> Y @ 5 target p1
}
";

    fn codes(text: &str) -> Vec<DiagCode> {
        parse(text).unwrap_err().into_iter().map(|d| d.code).collect()
    }

    #[test]
    fn parses_rules() {
        let doc = parse(TWO_PATCH).unwrap();
        let rules = &doc.volumes[0].rules;
        assert_eq!(rules[2].id, "r3");
        assert!(rules[2].rhs.is_empty());
        assert_eq!(rules[2].constant, 10.0);
        assert_eq!(rules[3].target.as_deref(), Some("p1"));
        assert_eq!(rules[3].constant, 5.0);
        let model = doc.to_model().unwrap();
        assert!(crate::validate_model(&model).is_empty());
        assert!(model.volumes[0].rules[3].is_dispersal());
        assert_eq!(model.volumes[1].counts, vec![0, 0, 0]);
    }

    #[test]
    fn self_edge_diagnostic() {
        let diags = parse("node p0\nedge p0 p0\n").unwrap_err();
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].code, DiagCode::SelfEdge);
        assert_eq!(diags[0].line, 2);
        assert!(diags[0].message.contains("self-edge not allowed"));
    }

    #[test]
    fn repeated_species_normalize_to_coefficient() {
        let text = TWO_PATCH.replace("X + Y -> 2 Y", "X + Y -> Y + Y");
        let doc = parse(&text).unwrap();
        assert_eq!(doc.volumes[0].rules[1].rhs, vec![("Y".to_string(), 2)]);
        assert_eq!(doc, parse(TWO_PATCH).unwrap());
    }

    #[test]
    fn error_codes_are_distinct_and_all_reported() {
        let text = "\
species X
species X
node a
volume a {
  rule r: Q -> 0 @ 1
  rule r: X -> 0 @ -2
  rule s: X -> X @ 1 target b
  rule t: 2x X -> 0 @ 1
}
";
        let c = codes(text);
        assert!(c.contains(&DiagCode::DuplicateId));
        assert!(c.contains(&DiagCode::UnknownSpecies));
        assert!(c.contains(&DiagCode::NegativeConstant));
        assert!(c.contains(&DiagCode::UnknownNode));
        assert!(c.contains(&DiagCode::MalformedStoichiometry));
        assert!(c.len() >= 5);
    }

    #[test]
    fn dispersal_shape_and_adjacency() {
        let text = "species Y\nnode a\nnode b\nnode c\nedge a b\nvolume a {\n rule d: Y -> 0 @ 1 target b\n rule e: Y -> Y @ 1 target c\n}\n";
        assert_eq!(codes(text), vec![DiagCode::MalformedDispersal, DiagCode::NotAdjacent]);
    }

    #[test]
    fn unclosed_block() {
        let d = parse("species Y\nnode a\nvolume a {\n init Y=3\n").unwrap_err();
        assert_eq!(d[0].code, DiagCode::UnclosedBlock);
        assert_eq!((d[0].line, d[0].column), (3, 8));
    }

    #[test]
    fn crlf_accepted_lf_emitted() {
        let doc = parse(&TWO_PATCH.replace('\n', "\r\n")).unwrap();
        assert_eq!(doc, parse(TWO_PATCH).unwrap());
        assert!(!serialize(&doc).contains('\r'));
    }

    #[test]
    fn empty_document() {
        let doc = ModelDocument::default();
        assert_eq!(serialize(&doc), "# metasim model\n");
        assert_eq!(parse(&serialize(&doc)).unwrap(), doc);
    }

    #[test]
    fn unit_weights_elided() {
        let doc = parse("node a\nnode b\nnode c\nedge a b\nedge b c weight 2.5\n").unwrap();
        let text = serialize(&doc);
        assert!(text.contains("edge a b\n"));
        assert!(text.contains("edge b c weight 2.5\n"));
    }

    #[test]
    fn config_block() {
        let doc = parse("config t_end=5 seed=9 engine=ssa epsilon=0.01 record_interval=0.5\n").unwrap();
        let cfg = doc.config.apply(SimulationConfig::default());
        assert_eq!(cfg.t_end, 5.0);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.engine, Engine::ExactSsa);
        assert_eq!(parse(&serialize(&doc)).unwrap(), doc);
        assert_eq!(codes("config speed=3\n"), vec![DiagCode::UnknownConfigKey]);
    }

    #[test]
    fn chain_cond4_document() {
        let s: Scenario = "migration:chain:cond4".parse().unwrap();
        let doc = emit_scenario(&s).unwrap();
        let dispersal: Vec<&RuleStmt> = doc.volumes[0].rules.iter().filter(|r| r.target.is_some()).collect();
        assert_eq!(dispersal.len(), 1);
        assert_eq!(dispersal[0].constant, 10.0);
    }

    #[test]
    fn star_colonization_document() {
        let s: Scenario = "colonization:star:IC1:p1".parse().unwrap();
        let doc = emit_scenario(&s).unwrap();
        let y = |v: &VolumeBlock| v.init.iter().find(|(s, _)| s == "Y").unwrap().1;
        assert_eq!(y(&doc.volumes[1]), 1000);
        for leaf in [2, 3, 4, 5] {
            assert_eq!(y(&doc.volumes[leaf]), 0);
        }
        assert!(serialize(&doc).contains("init A=200 X=10 Y=0"));
    }

    #[test]
    fn scenario_documents_round_trip() {
        for s in all_scenarios() {
            let doc = emit_scenario(&s).unwrap();
            let text = serialize(&doc);
            let back = parse(&text).unwrap_or_else(|d| panic!("{s}: {:?}", d));
            assert_eq!(back, doc, "{s}");
            assert_eq!(serialize(&back), text);
            assert_eq!(back.to_model().unwrap(), s.build().unwrap(), "{s}");
        }
        assert_eq!(migration_scenarios().len(), 24);
    }

    #[test]
    fn model_round_trip_with_weights_and_area() {
        let mut m = topology::build_migration_model(topology::TopologyKind::Grid, topology::MigrationCondition::numbered(2).unwrap());
        m.graph.edges.insert((0, 1), 3.5);
        m.volumes[2].area = 0.25;
        let doc = ModelDocument::from_model(&m, Some(&SimulationConfig::default()));
        let back = parse(&serialize(&doc)).unwrap();
        assert_eq!(back.to_model().unwrap(), m);
        assert_eq!(back.config.apply(SimulationConfig { seed: 5, ..Default::default() }), SimulationConfig::default());
    }

    #[test]
    fn tiny_and_huge_constants_round_trip() {
        let text = "species X\nnode a\nvolume a {\n rule r: X -> 0 @ 1e-12\n rule s: 0 -> X @ 3.5e20\n}\n";
        let doc = parse(text).unwrap();
        assert_eq!(doc.volumes[0].rules[0].constant, 1e-12);
        assert_eq!(parse(&serialize(&doc)).unwrap(), doc);
    }

    proptest::proptest! {
        #[test]
        fn parser_is_total(text in "\\PC{0,200}") {
            let _ = parse(&text);
        }

        #[test]
        fn diagnostics_point_inside_a_token(text in "[a-z0-9 {}+:=@#>\\-\n]{0,120}") {
            if let Err(diags) = parse(&text) {
                for d in diags {
                    let line: Vec<char> = text.lines().nth(d.line - 1).unwrap().chars().collect();
                    proptest::prop_assert!(d.column >= 1 && d.column <= line.len());
                    proptest::prop_assert!(!line[d.column - 1].is_whitespace());
                }
            }
        }
    }
}
