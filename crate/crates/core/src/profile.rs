//! Analytic compute and memory accounting of a layer graph.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::topology::{layer_macs, Graph, NetworkSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    pub macs: u64,
    pub params: u64,
    pub output_elements: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub topology: String,
    pub input_shape: Vec<usize>,
    pub rows: Vec<LayerRow>,
    pub total_macs: u64,
    /// Every registered tensor, running statistics included.
    pub total_params: u64,
    pub trainable_params: u64,
    /// Largest sum of simultaneously live activations, in f32 bytes.
    pub peak_activation_bytes: u64,
}

/// Counts a network for a batch of `n`.
pub fn count_resources<T: Scalar>(net: &NetworkSpec<T>, n: usize) -> Result<ResourceReport> {
    count_graph(&net.graph, &net.params, &net.input_shape(n), &[n, net.config.task_count], net.config.kind.as_str())
}

/// Counts any graph given its source shapes. Independent of parameter values.
pub fn count_graph<T: Scalar>(
    graph: &Graph,
    store: &ParamStore<T>,
    input: &[usize],
    code: &[usize],
    label: &str,
) -> Result<ResourceReport> {
    let shapes = graph.infer_shapes(store, input, code)?;
    let elems = |i: usize| shapes[i].iter().product::<usize>() as u64;

    let mut rows = Vec::with_capacity(graph.nodes.len());
    for (i, node) in graph.nodes.iter().enumerate() {
        let params = node.layer.params().iter().map(|&p| store.value(p).len() as u64).sum();
        rows.push(LayerRow {
            name: node.name.clone(),
            kind: node.layer.kind_name().to_string(),
            macs: layer_macs(&node.layer, &shapes, &shapes[i], store),
            params,
            output_elements: elems(i),
        });
    }

    // a tensor is live from its producer to its last consumer; the final
    // output stays live to the end
    let count = graph.nodes.len();
    let mut last_use: Vec<usize> = (0..count).collect();
    for (i, node) in graph.nodes.iter().enumerate() {
        for j in node.layer.inputs() {
            last_use[j] = last_use[j].max(i);
        }
    }
    if let Some(out) = count.checked_sub(1) {
        last_use[out] = out;
    }
    let mut peak = 0u64;
    for step in 0..count {
        let live: u64 = (0..=step).filter(|&j| last_use[j] >= step).map(elems).sum();
        peak = peak.max(live);
    }

    let total_params = store.iter().map(|(_, p)| p.value.len() as u64).sum();
    Ok(ResourceReport {
        topology: label.to_string(),
        input_shape: input.to_vec(),
        total_macs: rows.iter().map(|r| r.macs).sum(),
        rows,
        total_params,
        trainable_params: store.trainable_elements() as u64,
        peak_activation_bytes: peak * 4,
    })
}

fn human(v: u64) -> String {
    const UNITS: [(f64, &str); 3] = [(1e9, "G"), (1e6, "M"), (1e3, "K")];
    for (scale, unit) in UNITS {
        if v as f64 >= scale {
            return format!("{:.2}{unit}", v as f64 / scale);
        }
    }
    v.to_string()
}

impl ResourceReport {
    /// Aligned per-layer table followed by totals.
    pub fn render_table(&self) -> String {
        let headers = ["layer", "kind", "MACs", "params", "output"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| [r.name.clone(), r.kind.clone(), r.macs.to_string(), r.params.to_string(), r.output_elements.to_string()])
            .collect();
        let mut width = headers.map(str::len);
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: [&str; 5]| {
            let _ = writeln!(
                out,
                "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}  {:>w4$}",
                row[0],
                row[1],
                row[2],
                row[3],
                row[4],
                w0 = width[0],
                w1 = width[1],
                w2 = width[2],
                w3 = width[3],
                w4 = width[4]
            );
        };
        line(&mut out, headers);
        for row in &cells {
            line(&mut out, [&row[0], &row[1], &row[2], &row[3], &row[4]]);
        }
        let _ = writeln!(out, "topology         {}", self.topology);
        let _ = writeln!(out, "input            {:?}", self.input_shape);
        let _ = writeln!(out, "total MACs       {} ({})", self.total_macs, human(self.total_macs));
        let _ = writeln!(out, "params           {} ({} trainable)", self.total_params, self.trainable_params);
        let _ = writeln!(out, "peak activations {} bytes", self.peak_activation_bytes);
        out
    }
}
