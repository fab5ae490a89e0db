//! Graphviz DOT rendering of a decoded cell.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::genome::{decode, CellGenome, InputSource, SearchSpaceSpec};

/// Renders one cell as a `digraph`: an `input` node, one node per block
/// labelled with its two operations, and a `concat` sink fed by the loose ends.
pub fn genome_to_dot(
    spec: &SearchSpaceSpec,
    genome: &CellGenome,
    op_names: &[&str],
    graph_name: &str,
) -> Result<String> {
    let cell = decode(spec, genome)?;
    if op_names.len() < spec.n_ops {
        return Err(Error::Config(format!(
            "{} op names given for {} ops",
            op_names.len(),
            spec.n_ops
        )));
    }
    let mut out = String::new();
    writeln!(out, "digraph {} {{", quote(graph_name)).unwrap();
    writeln!(out, "  rankdir=BT;").unwrap();
    writeln!(out, "  input [shape=box, label=\"input\"];").unwrap();
    for (b, block) in cell.blocks.iter().enumerate() {
        let label = format!(
            "block {b}\\nA: {}\\nB: {}",
            op_names[block.ops[0]], op_names[block.ops[1]]
        );
        writeln!(out, "  block{b} [label={}];", quote(&label)).unwrap();
    }
    writeln!(out, "  concat [shape=box, label=\"concat\"];").unwrap();
    for (b, block) in cell.blocks.iter().enumerate() {
        for (src, slot) in block.inputs.iter().zip(["A", "B"]) {
            let from = match src {
                InputSource::DagInput => "input".to_string(),
                InputSource::Block(k) => format!("block{k}"),
            };
            writeln!(out, "  {from} -> block{b} [label=\"{slot}\"];").unwrap();
        }
    }
    for b in &cell.loose_ends {
        writeln!(out, "  block{b} -> concat;").unwrap();
    }
    out.push_str("}\n");
    Ok(out)
}

fn quote(s: &str) -> String {
    // `\n` inside labels is a DOT escape and is left alone.
    format!("\"{}\"", s.replace('"', "\\\""))
}
