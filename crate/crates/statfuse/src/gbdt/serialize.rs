//! Versioned text serialization for tree ensembles.
//!
//! Format (line-oriented, UTF-8):
//!
//! ```text
//! gbm v1
//! objective <squared_error | binary_logloss | multiclass <v> | pinball <P>>
//! features <d>
//! feature <name> <numeric | categorical <n_levels>>     (d lines)
//! base <v floats>
//! iterations <n> leaves <selected> degenerate <0|1>
//! trees <count>
//! tree <n_nodes> <n_leaves> <root>                       (per tree)
//! node <split> <left> <right> <default 0|1>              (n_nodes lines)
//! leaves <n_leaves floats>
//! end
//! ```
//!
//! Splits: `num <feature> <threshold>` or `cat <feature> <left levels
//! comma-sep> <observed levels comma-sep>`. Children encode as `n<i>` (inner
//! node) or `l<i>` (leaf). Floats print in shortest round-trip decimal, so
//! parsing reproduces predictions bit-exactly.

use std::fmt::Write as _;

use super::ensemble::TreeEnsemble;
use super::frame::FeatureKind;
use super::objective::Objective;
use super::tree::{Child, Split, Tree, TreeNode};
use crate::error::{Error, Result};

pub fn ensemble_to_string(e: &TreeEnsemble) -> String {
    let mut s = String::new();
    s.push_str("gbm v1\n");
    match e.objective {
        Objective::SquaredError => s.push_str("objective squared_error\n"),
        Objective::BinaryLogloss => s.push_str("objective binary_logloss\n"),
        Objective::MulticlassLogloss { n_classes } => {
            let _ = writeln!(s, "objective multiclass {n_classes}");
        }
        Objective::Pinball { percentile } => {
            let _ = writeln!(s, "objective pinball {percentile}");
        }
    }
    let _ = writeln!(s, "features {}", e.feature_names.len());
    for (name, kind) in e.feature_names.iter().zip(&e.feature_kinds) {
        match kind {
            FeatureKind::Numeric => {
                let _ = writeln!(s, "feature {name} numeric");
            }
            FeatureKind::Categorical { n_levels } => {
                let _ = writeln!(s, "feature {name} categorical {n_levels}");
            }
        }
    }
    s.push_str("base");
    for b in &e.base_scores {
        let _ = write!(s, " {b}");
    }
    s.push('\n');
    let _ = writeln!(
        s,
        "iterations {} leaves {} degenerate {}",
        e.n_iterations,
        e.selected_leaves,
        u8::from(e.degenerate)
    );
    let _ = writeln!(s, "trees {}", e.trees.len());
    for tree in &e.trees {
        let _ = writeln!(
            s,
            "tree {} {} {}",
            tree.nodes.len(),
            tree.leaf_values.len(),
            child_str(tree.root)
        );
        for node in &tree.nodes {
            s.push_str("node ");
            match &node.split {
                Split::Numeric {
                    feature, threshold, ..
                } => {
                    let _ = write!(s, "num {feature} {threshold}");
                }
                Split::Categorical {
                    feature,
                    left_levels,
                    observed,
                } => {
                    let _ = write!(s, "cat {feature} {} {}", join(left_levels), join(observed));
                }
            }
            let _ = writeln!(
                s,
                " {} {} {}",
                child_str(node.left),
                child_str(node.right),
                u8::from(node.default_left)
            );
        }
        s.push_str("leaves");
        for v in &tree.leaf_values {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    s.push_str("end\n");
    s
}

pub fn ensemble_from_str(text: &str) -> Result<TreeEnsemble> {
    let mut lines = text.lines();
    let bad = |msg: &str| Error::Serialize(format!("gbm parse: {msg}"));

    expect(lines.next(), "gbm v1").map_err(|m| bad(&m))?;

    let obj_line = lines.next().ok_or_else(|| bad("missing objective"))?;
    let mut it = obj_line.split_whitespace();
    expect_tok(&mut it, "objective").map_err(|m| bad(&m))?;
    let objective = match it.next() {
        Some("squared_error") => Objective::SquaredError,
        Some("binary_logloss") => Objective::BinaryLogloss,
        Some("multiclass") => Objective::MulticlassLogloss {
            n_classes: parse(it.next()).map_err(|m| bad(&m))?,
        },
        Some("pinball") => Objective::Pinball {
            percentile: parse(it.next()).map_err(|m| bad(&m))?,
        },
        other => return Err(bad(&format!("unknown objective {other:?}"))),
    };

    let feat_line = lines.next().ok_or_else(|| bad("missing features"))?;
    let mut it = feat_line.split_whitespace();
    expect_tok(&mut it, "features").map_err(|m| bad(&m))?;
    let d: usize = parse(it.next()).map_err(|m| bad(&m))?;
    let mut feature_names = Vec::with_capacity(d);
    let mut feature_kinds = Vec::with_capacity(d);
    for _ in 0..d {
        let line = lines.next().ok_or_else(|| bad("missing feature line"))?;
        let mut it = line.split_whitespace();
        expect_tok(&mut it, "feature").map_err(|m| bad(&m))?;
        feature_names.push(
            it.next()
                .ok_or_else(|| bad("missing feature name"))?
                .to_string(),
        );
        match it.next() {
            Some("numeric") => feature_kinds.push(FeatureKind::Numeric),
            Some("categorical") => feature_kinds.push(FeatureKind::Categorical {
                n_levels: parse(it.next()).map_err(|m| bad(&m))?,
            }),
            other => return Err(bad(&format!("unknown feature kind {other:?}"))),
        }
    }

    let base_line = lines.next().ok_or_else(|| bad("missing base"))?;
    let mut it = base_line.split_whitespace();
    expect_tok(&mut it, "base").map_err(|m| bad(&m))?;
    let base_scores: Vec<f64> = it
        .map(|t| t.parse::<f64>().map_err(|e| bad(&e.to_string())))
        .collect::<Result<_>>()?;

    let meta_line = lines.next().ok_or_else(|| bad("missing iterations"))?;
    let mut it = meta_line.split_whitespace();
    expect_tok(&mut it, "iterations").map_err(|m| bad(&m))?;
    let n_iterations: usize = parse(it.next()).map_err(|m| bad(&m))?;
    expect_tok(&mut it, "leaves").map_err(|m| bad(&m))?;
    let selected_leaves: usize = parse(it.next()).map_err(|m| bad(&m))?;
    expect_tok(&mut it, "degenerate").map_err(|m| bad(&m))?;
    let degenerate: u8 = parse(it.next()).map_err(|m| bad(&m))?;

    let count_line = lines.next().ok_or_else(|| bad("missing trees"))?;
    let mut it = count_line.split_whitespace();
    expect_tok(&mut it, "trees").map_err(|m| bad(&m))?;
    let n_trees: usize = parse(it.next()).map_err(|m| bad(&m))?;

    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let head = lines.next().ok_or_else(|| bad("missing tree header"))?;
        let mut it = head.split_whitespace();
        expect_tok(&mut it, "tree").map_err(|m| bad(&m))?;
        let n_nodes: usize = parse(it.next()).map_err(|m| bad(&m))?;
        let n_leaves: usize = parse(it.next()).map_err(|m| bad(&m))?;
        let root = parse_child(it.next()).map_err(|m| bad(&m))?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let line = lines.next().ok_or_else(|| bad("missing node line"))?;
            let mut it = line.split_whitespace();
            expect_tok(&mut it, "node").map_err(|m| bad(&m))?;
            let split = match it.next() {
                Some("num") => {
                    let feature: u32 = parse(it.next()).map_err(|m| bad(&m))?;
                    let threshold: f64 = parse(it.next()).map_err(|m| bad(&m))?;
                    Split::Numeric {
                        feature,
                        threshold,
                        bin: 0,
                    }
                }
                Some("cat") => {
                    let feature: u32 = parse(it.next()).map_err(|m| bad(&m))?;
                    let left_levels = parse_levels(it.next()).map_err(|m| bad(&m))?;
                    let observed = parse_levels(it.next()).map_err(|m| bad(&m))?;
                    Split::Categorical {
                        feature,
                        left_levels,
                        observed,
                    }
                }
                other => return Err(bad(&format!("unknown split {other:?}"))),
            };
            let left = parse_child(it.next()).map_err(|m| bad(&m))?;
            let right = parse_child(it.next()).map_err(|m| bad(&m))?;
            let default: u8 = parse(it.next()).map_err(|m| bad(&m))?;
            nodes.push(TreeNode {
                split,
                left,
                right,
                default_left: default == 1,
            });
        }
        let leaf_line = lines.next().ok_or_else(|| bad("missing leaves line"))?;
        let mut it = leaf_line.split_whitespace();
        expect_tok(&mut it, "leaves").map_err(|m| bad(&m))?;
        let leaf_values: Vec<f64> = it
            .map(|t| t.parse::<f64>().map_err(|e| bad(&e.to_string())))
            .collect::<Result<_>>()?;
        if leaf_values.len() != n_leaves {
            return Err(bad("leaf count mismatch"));
        }
        trees.push(Tree {
            nodes,
            leaf_values,
            root,
        });
    }
    expect(lines.next(), "end").map_err(|m| bad(&m))?;

    Ok(TreeEnsemble {
        objective,
        feature_names,
        feature_kinds,
        base_scores,
        trees,
        n_iterations,
        selected_leaves,
        degenerate: degenerate == 1,
    })
}

fn child_str(c: Child) -> String {
    match c {
        Child::Node(i) => format!("n{i}"),
        Child::Leaf(i) => format!("l{i}"),
    }
}

fn parse_child(tok: Option<&str>) -> std::result::Result<Child, String> {
    let tok = tok.ok_or("missing child token")?;
    let (tag, rest) = tok.split_at(1);
    let ix: u32 = rest.parse().map_err(|_| format!("bad child '{tok}'"))?;
    match tag {
        "n" => Ok(Child::Node(ix)),
        "l" => Ok(Child::Leaf(ix)),
        _ => Err(format!("bad child '{tok}'")),
    }
}

fn join(levels: &[u32]) -> String {
    if levels.is_empty() {
        return "-".into();
    }
    levels
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_levels(tok: Option<&str>) -> std::result::Result<Vec<u32>, String> {
    let tok = tok.ok_or("missing level set")?;
    if tok == "-" {
        return Ok(Vec::new());
    }
    tok.split(',')
        .map(|t| t.parse::<u32>().map_err(|e| e.to_string()))
        .collect()
}

fn expect(line: Option<&str>, want: &str) -> std::result::Result<(), String> {
    match line {
        Some(l) if l.trim() == want => Ok(()),
        other => Err(format!("expected '{want}', got {other:?}")),
    }
}

fn expect_tok(it: &mut std::str::SplitWhitespace<'_>, want: &str) -> std::result::Result<(), String> {
    match it.next() {
        Some(t) if t == want => Ok(()),
        other => Err(format!("expected '{want}', got {other:?}")),
    }
}

fn parse<T: std::str::FromStr>(tok: Option<&str>) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    tok.ok_or("missing token".to_string())?
        .parse::<T>()
        .map_err(|e| e.to_string())
}
