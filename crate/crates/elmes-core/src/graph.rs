//! Agent interaction graph: direction parsing, runtime routing, DOT output.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::config::AgentSpec;

pub const START: &str = "START";
pub const END: &str = "END";

pub fn is_sentinel(name: &str) -> bool {
    name == START || name == END
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("direction '{text}' is malformed: {reason}")]
    Malformed { text: String, reason: String },
    #[error("unknown router kind '{kind}'")]
    UnknownRouter { kind: String },
    #[error("direction references undefined node '{node}'")]
    UndefinedNode { node: String },
    #[error("node '{node}' has more than one outgoing direction")]
    DuplicateOutgoing { node: String },
    #[error("START must have exactly one outgoing direction")]
    StartDegree,
    #[error("END is unreachable from START under every router branch")]
    EndUnreachable,
    #[error("node '{node}' has no outgoing direction")]
    NoSuccessor { node: String },
}

/// Graph node name: an agent id or one of the START/END sentinels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn start() -> Self {
        NodeId(START.to_string())
    }

    pub fn end() -> Self {
        NodeId(END.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_start(&self) -> bool {
        self.0 == START
    }

    pub fn is_end(&self) -> bool {
        self.0 == END
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(value: &str) -> Self {
        NodeId(value.to_string())
    }
}

/// Conditional successor: `exists_to` wins when any keyword occurs in the
/// latest message (case-folded substring match), otherwise `else_to`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterSpec {
    pub keywords: Vec<String>,
    pub exists_to: NodeId,
    pub else_to: NodeId,
}

impl RouterSpec {
    pub fn matches(&self, text: &str) -> bool {
        let folded = text.to_lowercase();
        self.keywords
            .iter()
            .any(|k| folded.contains(&k.to_lowercase()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EdgeTarget {
    Plain(NodeId),
    Router(RouterSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionEdge {
    pub from: NodeId,
    pub to: EdgeTarget,
}

impl DirectionEdge {
    /// Canonical direction-string form; `parse_direction` inverts it.
    pub fn canonical(&self) -> String {
        match &self.to {
            EdgeTarget::Plain(to) => format!("{} -> {}", self.from, to),
            EdgeTarget::Router(router) => {
                let keywords = router
                    .keywords
                    .iter()
                    .map(|k| format!("{k:?}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                format!(
                    "{} -> router:any_keyword_route(keywords=[{}], exists_to={}, else_to={})",
                    self.from, keywords, router.exists_to, router.else_to
                )
            }
        }
    }
}

/// Directed interaction graph with single-outgoing-edge nodes; routers carry
/// the branching. Cycles are permitted, termination comes from router exits
/// plus the orchestrator's turn limit.
#[derive(Debug, Clone)]
pub struct WorkflowGraph {
    nodes: Vec<NodeId>,
    edges: BTreeMap<NodeId, DirectionEdge>,
}

impl WorkflowGraph {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn edge(&self, from: &NodeId) -> Option<&DirectionEdge> {
        self.edges.get(from)
    }

    pub fn entry(&self) -> &DirectionEdge {
        self.edges
            .get(&NodeId::start())
            .expect("validated: START has an outgoing edge")
    }
}

// ---------------------------------------------------------------------------
// Direction-string parsing
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Self { text, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.text.len() - trimmed.len();
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> &'a str {
        self.skip_ws();
        let rest = self.rest();
        let end = rest
            .char_indices()
            .find(|(_, c)| !pred(*c))
            .map_or(rest.len(), |(i, _)| i);
        self.pos += end;
        &rest[..end]
    }

    fn quoted_string(&mut self) -> Option<String> {
        self.skip_ws();
        let rest = self.rest();
        let mut chars = rest.char_indices();
        match chars.next() {
            Some((_, '"')) => {}
            _ => return None,
        }
        let mut out = String::new();
        let mut escaped = false;
        for (i, c) in chars {
            if escaped {
                out.push(c);
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                self.pos += i + 1;
                return Some(out);
            } else {
                out.push(c);
            }
        }
        None
    }

    fn done(&mut self) -> bool {
        self.skip_ws();
        self.rest().is_empty()
    }
}

fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '-' | '.')
}

fn malformed(text: &str, reason: impl Into<String>) -> GraphError {
    GraphError::Malformed {
        text: text.to_string(),
        reason: reason.into(),
    }
}

fn parse_target_name(cur: &mut Cursor<'_>, text: &str) -> Result<NodeId, GraphError> {
    if let Some(quoted) = cur.quoted_string() {
        if quoted.is_empty() {
            return Err(malformed(text, "empty node name"));
        }
        return Ok(NodeId(quoted));
    }
    let name = cur.take_while(is_name_char);
    if name.is_empty() {
        Err(malformed(text, "expected a node name"))
    } else {
        Ok(NodeId(name.to_string()))
    }
}

/// Parses one direction line: `FROM -> TO` or
/// `FROM -> router:any_keyword_route(keywords=[...], exists_to=X, else_to="Y")`.
pub fn parse_direction(text: &str) -> Result<DirectionEdge, GraphError> {
    let mut cur = Cursor::new(text);
    let from = parse_target_name(&mut cur, text)?;
    if !cur.eat("->") {
        return Err(malformed(text, "expected '->' after the source node"));
    }
    cur.skip_ws();
    let to = if cur.rest().starts_with("router:") {
        cur.eat("router:");
        let kind = cur.take_while(is_name_char);
        if kind != "any_keyword_route" {
            return Err(GraphError::UnknownRouter {
                kind: kind.to_string(),
            });
        }
        EdgeTarget::Router(parse_router_args(&mut cur, text)?)
    } else {
        EdgeTarget::Plain(parse_target_name(&mut cur, text)?)
    };
    if !cur.done() {
        return Err(malformed(text, "unexpected trailing input"));
    }
    if from.is_end() {
        return Err(malformed(text, "END cannot have outgoing directions"));
    }
    if let EdgeTarget::Plain(to) = &to {
        if to.is_start() {
            return Err(malformed(text, "START cannot be a direction target"));
        }
    }
    Ok(DirectionEdge { from, to })
}

fn parse_router_args(cur: &mut Cursor<'_>, text: &str) -> Result<RouterSpec, GraphError> {
    if !cur.eat("(") {
        return Err(malformed(text, "expected '(' after router kind"));
    }
    let mut keywords: Option<Vec<String>> = None;
    let mut exists_to: Option<NodeId> = None;
    let mut else_to: Option<NodeId> = None;
    loop {
        let key = cur.take_while(|c| c.is_alphanumeric() || c == '_');
        if key.is_empty() {
            return Err(malformed(text, "expected an argument name"));
        }
        if !cur.eat("=") {
            return Err(malformed(text, format!("expected '=' after '{key}'")));
        }
        match key {
            "keywords" => {
                if !cur.eat("[") {
                    return Err(malformed(text, "keywords must be a [..] list"));
                }
                let mut list = Vec::new();
                if !cur.eat("]") {
                    loop {
                        let keyword = cur
                            .quoted_string()
                            .ok_or_else(|| malformed(text, "keywords must be quoted strings"))?;
                        if keyword.is_empty() {
                            return Err(malformed(text, "keywords must be non-empty"));
                        }
                        list.push(keyword);
                        if cur.eat("]") {
                            break;
                        }
                        if !cur.eat(",") {
                            return Err(malformed(text, "expected ',' or ']' in keyword list"));
                        }
                        // Tolerate a trailing comma before the closing bracket.
                        if cur.eat("]") {
                            break;
                        }
                    }
                }
                keywords = Some(list);
            }
            "exists_to" => exists_to = Some(parse_target_name(cur, text)?),
            "else_to" => else_to = Some(parse_target_name(cur, text)?),
            other => {
                return Err(malformed(
                    text,
                    format!("unknown router argument '{other}'"),
                ));
            }
        }
        if cur.eat(")") {
            break;
        }
        if !cur.eat(",") {
            return Err(malformed(text, "expected ',' or ')' in router arguments"));
        }
    }
    let keywords = keywords.ok_or_else(|| malformed(text, "router requires 'keywords'"))?;
    if keywords.is_empty() {
        return Err(malformed(text, "router requires at least one keyword"));
    }
    Ok(RouterSpec {
        keywords,
        exists_to: exists_to.ok_or_else(|| malformed(text, "router requires 'exists_to'"))?,
        else_to: else_to.ok_or_else(|| malformed(text, "router requires 'else_to'"))?,
    })
}

// ---------------------------------------------------------------------------
// Graph construction and routing
// ---------------------------------------------------------------------------

/// Builds and validates the workflow graph from the config's direction lines.
pub fn build_graph(
    agents: &[AgentSpec],
    directions: &[String],
) -> Result<WorkflowGraph, GraphError> {
    let mut nodes: Vec<NodeId> = vec![NodeId::start()];
    nodes.extend(agents.iter().map(|a| NodeId(a.id.clone())));
    nodes.push(NodeId::end());

    let known = |node: &NodeId| nodes.contains(node);
    let mut edges: BTreeMap<NodeId, DirectionEdge> = BTreeMap::new();
    for text in directions {
        let edge = parse_direction(text)?;
        if !known(&edge.from) {
            return Err(GraphError::UndefinedNode {
                node: edge.from.0.clone(),
            });
        }
        let targets: Vec<&NodeId> = match &edge.to {
            EdgeTarget::Plain(to) => vec![to],
            EdgeTarget::Router(r) => vec![&r.exists_to, &r.else_to],
        };
        for target in targets {
            if !known(target) {
                return Err(GraphError::UndefinedNode {
                    node: target.0.clone(),
                });
            }
            if target.is_start() {
                return Err(GraphError::Malformed {
                    text: text.clone(),
                    reason: "START cannot be a direction target".into(),
                });
            }
        }
        if edges.insert(edge.from.clone(), edge.clone()).is_some() {
            return Err(GraphError::DuplicateOutgoing {
                node: edge.from.0.clone(),
            });
        }
    }

    if !edges.contains_key(&NodeId::start()) {
        return Err(GraphError::StartDegree);
    }

    // END must be reachable under at least one assignment of router branches.
    let mut visited = vec![NodeId::start()];
    let mut frontier = vec![NodeId::start()];
    while let Some(node) = frontier.pop() {
        let Some(edge) = edges.get(&node) else {
            continue;
        };
        let successors: Vec<NodeId> = match &edge.to {
            EdgeTarget::Plain(to) => vec![to.clone()],
            EdgeTarget::Router(r) => vec![r.exists_to.clone(), r.else_to.clone()],
        };
        for next in successors {
            if !visited.contains(&next) {
                visited.push(next.clone());
                frontier.push(next);
            }
        }
    }
    if !visited.contains(&NodeId::end()) {
        return Err(GraphError::EndUnreachable);
    }

    Ok(WorkflowGraph { nodes, edges })
}

/// Resolves the successor of `current` given the latest message text.
pub fn next_node(
    graph: &WorkflowGraph,
    current: &NodeId,
    last_message_text: &str,
) -> Result<NodeId, GraphError> {
    let edge = graph.edge(current).ok_or_else(|| GraphError::NoSuccessor {
        node: current.0.clone(),
    })?;
    Ok(match &edge.to {
        EdgeTarget::Plain(to) => to.clone(),
        EdgeTarget::Router(router) => {
            if router.matches(last_message_text) {
                router.exists_to.clone()
            } else {
                router.else_to.clone()
            }
        }
    })
}

// ---------------------------------------------------------------------------
// DOT rendering
// ---------------------------------------------------------------------------

fn dot_id(name: &str) -> String {
    let bare = !name.is_empty()
        && !name.chars().next().unwrap().is_ascii_digit()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if bare {
        name.to_string()
    } else {
        format!("\"{}\"", name.replace('\\', "\\\\").replace('"', "\\\""))
    }
}

fn dot_label(text: &str) -> String {
    text.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Emits the graph as DOT text for external renderers.
pub fn to_dot(graph: &WorkflowGraph) -> String {
    let mut out = String::from("digraph workflow {\n  rankdir=LR;\n");
    for node in graph.nodes() {
        let shape = if is_sentinel(node.as_str()) {
            " [shape=doublecircle]"
        } else {
            " [shape=box]"
        };
        out.push_str(&format!("  {}{};\n", dot_id(node.as_str()), shape));
    }
    for edge in graph.edges.values() {
        match &edge.to {
            EdgeTarget::Plain(to) => {
                out.push_str(&format!(
                    "  {} -> {};\n",
                    dot_id(edge.from.as_str()),
                    dot_id(to.as_str())
                ));
            }
            EdgeTarget::Router(router) => {
                let keywords = router.keywords.join(" | ");
                out.push_str(&format!(
                    "  {} -> {} [label=\"exists: {}\"];\n",
                    dot_id(edge.from.as_str()),
                    dot_id(router.exists_to.as_str()),
                    dot_label(&keywords)
                ));
                out.push_str(&format!(
                    "  {} -> {} [label=\"else\"];\n",
                    dot_id(edge.from.as_str()),
                    dot_id(router.else_to.as_str())
                ));
            }
        }
    }
    out.push_str("}\n");
    out
}
