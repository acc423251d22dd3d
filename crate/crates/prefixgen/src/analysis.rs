//! Condition-relation analysis: reads the prefix block out of the model's
//! attention maps and measures, by finite differences over the conditioning
//! values, how strongly each condition row steers attention to the others.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::encoders::{EncoderError, PocketGraph, CONDITION_LABELS, CONDITION_ROWS};
use crate::model::{Model, ModelError};
use crate::props::{PropVec, N_PROPERTIES};
use crate::smiles::BOS_ID;
use crate::tensor::{no_grad, Tensor};

/// One prefix-to-prefix attention map in f64, row-stochastic and lower
/// triangular under the causal mask.
pub type ConditionMap = [[f64; CONDITION_ROWS]; CONDITION_ROWS];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("relation csv: {0}")]
    Csv(String),
}

pub struct PrefixAttention {
    /// Per layer, per head.
    pub per_head: Vec<Vec<ConditionMap>>,
    /// Arithmetic mean over every layer and head.
    pub mean: ConditionMap,
}

/// Relation strengths between condition rows: absolute forward differences
/// of the aggregated prefix attention map under a bump of each scalar
/// condition, summed over the five conditions.
pub struct RelationMatrix {
    pub r: ConditionMap,
    pub delta: f64,
    pub labels: [&'static str; CONDITION_ROWS],
}

/// Prefix block of every head's attention map. A single BOS token stands in
/// for the sequence: the causal mask keeps prefix rows blind to token
/// positions, so the block is the same whatever follows.
pub fn extract_prefix_attention(
    model: &Model,
    pocket: Option<&PocketGraph>,
    conditions: &PropVec,
) -> Result<PrefixAttention, AnalysisError> {
    let _guard = no_grad();
    let prefix = model.encoder.assemble_prefix(pocket, conditions)?;
    let (_, _, maps) = model.forward_with_maps(&prefix, &[BOS_ID])?;
    let per_head: Vec<Vec<ConditionMap>> =
        maps.iter().map(|layer| layer.iter().map(prefix_block).collect()).collect();
    let mut mean = [[0.0; CONDITION_ROWS]; CONDITION_ROWS];
    let count = per_head.iter().map(|l| l.len()).sum::<usize>() as f64;
    for layer in &per_head {
        for map in layer {
            for i in 0..CONDITION_ROWS {
                for j in 0..CONDITION_ROWS {
                    mean[i][j] += map[i][j] / count;
                }
            }
        }
    }
    Ok(PrefixAttention { per_head, mean })
}

fn prefix_block(map: &Tensor) -> ConditionMap {
    let (_, cols) = map.shape();
    let data = map.to_vec();
    let mut out = [[0.0; CONDITION_ROWS]; CONDITION_ROWS];
    for i in 0..CONDITION_ROWS {
        for j in 0..CONDITION_ROWS {
            out[i][j] = data[i * cols + j] as f64;
        }
    }
    out
}

/// Bumps each scalar condition in turn (the pocket row stays fixed),
/// re-extracts the aggregated map, and sums the absolute forward
/// differences. Division is by the step each condition actually realized;
/// the rule-count condition moves on an integer grid and drops out when the
/// requested delta rounds to no movement at all.
pub fn relation_matrix(
    model: &Model,
    pocket: Option<&PocketGraph>,
    base: &PropVec,
    delta: f64,
) -> Result<RelationMatrix, AnalysisError> {
    assert!(delta != 0.0 && delta.is_finite(), "delta must be a nonzero finite step");
    let a0 = extract_prefix_attention(model, pocket, base)?.mean;
    let mut r = [[0.0; CONDITION_ROWS]; CONDITION_ROWS];
    for p in 0..N_PROPERTIES {
        let bumped = base.shifted(p, delta);
        let step = bumped.values()[p] - base.values()[p];
        if step == 0.0 {
            continue;
        }
        let ap = extract_prefix_attention(model, pocket, &bumped)?.mean;
        for i in 0..CONDITION_ROWS {
            for j in 0..CONDITION_ROWS {
                r[i][j] += ((ap[i][j] - a0[i][j]) / step).abs();
            }
        }
    }
    Ok(RelationMatrix { r, delta, labels: CONDITION_LABELS })
}

/// Labelled CSV, one header line then one line per condition row. Values
/// print in shortest round-trip form, so re-parsing recovers them exactly.
pub fn write_condition_map<W: Write>(w: &mut W, map: &ConditionMap) -> io::Result<()> {
    writeln!(w, ",{}", CONDITION_LABELS.join(","))?;
    for (label, row) in CONDITION_LABELS.iter().zip(map) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{label},{}", cells.join(","))?;
    }
    Ok(())
}

pub fn write_relation_csv<W: Write>(w: &mut W, m: &RelationMatrix) -> io::Result<()> {
    write_condition_map(w, &m.r)
}

pub fn export_heatmap(path: &Path, m: &RelationMatrix) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_relation_csv(&mut w, m)?;
    w.flush()
}

/// Reads a matrix written by `write_relation_csv` back into memory.
pub fn parse_relation_csv(text: &str) -> Result<ConditionMap, AnalysisError> {
    let bad = |msg: String| AnalysisError::Csv(msg);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let expect = format!(",{}", CONDITION_LABELS.join(","));
    if header != expect {
        return Err(bad(format!("header {header:?}, expected {expect:?}")));
    }
    let mut out = [[0.0; CONDITION_ROWS]; CONDITION_ROWS];
    for (i, label) in CONDITION_LABELS.iter().enumerate() {
        let line = lines.next().ok_or_else(|| bad(format!("missing row {label}")))?;
        let mut parts = line.split(',');
        let got = parts.next().unwrap_or("");
        if got != *label {
            return Err(bad(format!("row {i} labelled {got:?}, expected {label:?}")));
        }
        for j in 0..CONDITION_ROWS {
            let cell = parts.next().ok_or_else(|| bad(format!("row {label} is short")))?;
            out[i][j] = cell
                .parse::<f64>()
                .map_err(|e| bad(format!("row {label} col {j}: {e}")))?;
        }
        if parts.next().is_some() {
            return Err(bad(format!("row {label} has trailing cells")));
        }
    }
    if lines.next().is_some() {
        return Err(bad("trailing lines after the matrix".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::smiles::{build_vocab, tokenize};

    fn toy_model(d: usize, heads: usize, layers: usize, seed: u64) -> Model {
        let corpus: Vec<Vec<_>> =
            ["CCO", "c1ccccc1"].iter().map(|s| tokenize(s).unwrap()).collect();
        let vocab = build_vocab(&corpus).unwrap();
        Model::init(ModelConfig { d, heads, layers, max_len: 16, vocab: vocab.size(), seed })
    }

    fn base_conditions() -> PropVec {
        PropVec { vina: -7.2, qed: 0.6, sa: 0.8, logp: 1.5, lipinski: 5, mask: [true; 5] }
    }

    #[test]
    fn prefix_maps_are_causal_distributions() {
        let model = toy_model(16, 2, 2, 41);
        let att = extract_prefix_attention(&model, None, &base_conditions()).unwrap();
        assert_eq!(att.per_head.len(), 2);
        assert_eq!(att.per_head[0].len(), 2);
        let mut all: Vec<&ConditionMap> = att.per_head.iter().flatten().collect();
        all.push(&att.mean);
        for map in all {
            for i in 0..CONDITION_ROWS {
                for j in i + 1..CONDITION_ROWS {
                    assert_eq!(map[i][j], 0.0, "entry ({i},{j}) above the diagonal");
                }
                let sum: f64 = map[i].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
            }
        }
    }

    #[test]
    fn single_head_map_matches_hand_softmax() {
        let model = toy_model(4, 1, 1, 43);
        let c = base_conditions();
        let att = extract_prefix_attention(&model, None, &c).unwrap();

        let params = model.parameters();
        let find = |name: &str| {
            params.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone()).unwrap()
        };
        let prefix = model.encoder.assemble_prefix(None, &c).unwrap();
        let q = prefix.matmul(&find("block0.wq0")).to_vec();
        let k = prefix.matmul(&find("block0.wk0")).to_vec();
        let dh = 4;
        let scale = 1.0 / (dh as f64).sqrt();
        for i in 0..CONDITION_ROWS {
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    (0..dh)
                        .map(|x| q[i * dh + x] as f64 * k[j * dh + x] as f64)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..=i {
                let hand = exps[j] / z;
                assert!(
                    (att.per_head[0][0][i][j] - hand).abs() < 1e-6,
                    "entry ({i},{j}): extracted {} vs hand {hand}",
                    att.per_head[0][0][i][j]
                );
            }
        }
    }

    #[test]
    fn aggregated_map_is_the_arithmetic_mean() {
        let model = toy_model(16, 2, 3, 47);
        let att = extract_prefix_attention(&model, None, &base_conditions()).unwrap();
        let count = 6.0;
        for i in 0..CONDITION_ROWS {
            for j in 0..CONDITION_ROWS {
                let mean: f64 = att
                    .per_head
                    .iter()
                    .flatten()
                    .map(|m| m[i][j] / count)
                    .sum();
                assert!((att.mean[i][j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_projections_give_uniform_maps_and_zero_relations() {
        let model = toy_model(8, 2, 2, 53);
        for (name, t) in model.parameters() {
            if name.contains(".wq") || name.contains(".wk") {
                t.set_data(&vec![0.0; t.len()]);
            }
        }
        let att = extract_prefix_attention(&model, None, &base_conditions()).unwrap();
        for map in att.per_head.iter().flatten() {
            for i in 0..CONDITION_ROWS {
                for j in 0..=i {
                    let uniform = 1.0 / (i + 1) as f64;
                    assert!((map[i][j] - uniform).abs() < 1e-6);
                }
            }
        }
        let rel = relation_matrix(&model, None, &base_conditions(), 1.0).unwrap();
        for row in &rel.r {
            for &v in row {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn relation_matrix_is_lower_triangular_and_bounded() {
        let model = toy_model(16, 2, 2, 59);
        let rel = relation_matrix(&model, None, &base_conditions(), 1.0).unwrap();
        let mut touched = false;
        for i in 0..CONDITION_ROWS {
            for j in 0..CONDITION_ROWS {
                let v = rel.r[i][j];
                assert!(v.is_finite() && v >= 0.0);
                assert!(v <= 10.0 / rel.delta, "entry ({i},{j}) = {v} breaks the bound");
                if j > i {
                    assert_eq!(v, 0.0);
                }
                touched |= v != 0.0;
            }
        }
        assert!(touched, "random model produced an all-zero relation matrix");
    }

    #[test]
    fn fully_masked_conditions_relate_to_nothing() {
        let model = toy_model(16, 2, 2, 61);
        let mut c = base_conditions();
        c.mask = [false; 5];
        let rel = relation_matrix(&model, None, &c, 1.0).unwrap();
        for row in &rel.r {
            for &v in row {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn relations_are_deterministic_and_perturbation_order_free() {
        let model = toy_model(16, 2, 2, 67);
        let base = base_conditions();
        let rel = relation_matrix(&model, None, &base, 1.0).unwrap();
        let again = relation_matrix(&model, None, &base, 1.0).unwrap();
        assert_eq!(rel.r, again.r);

        // Recompute from maps extracted in reverse condition order.
        let a0 = extract_prefix_attention(&model, None, &base).unwrap().mean;
        let mut maps = Vec::new();
        for p in (0..N_PROPERTIES).rev() {
            let bumped = base.shifted(p, 1.0);
            maps.push((p, extract_prefix_attention(&model, None, &bumped).unwrap().mean));
        }
        maps.sort_by_key(|(p, _)| *p);
        let mut hand = [[0.0; CONDITION_ROWS]; CONDITION_ROWS];
        for (_, ap) in &maps {
            for i in 0..CONDITION_ROWS {
                for j in 0..CONDITION_ROWS {
                    hand[i][j] += (ap[i][j] - a0[i][j]).abs();
                }
            }
        }
        assert_eq!(rel.r, hand);
    }

    #[test]
    fn csv_export_shape_and_stability() {
        let zero = RelationMatrix {
            r: [[0.0; CONDITION_ROWS]; CONDITION_ROWS],
            delta: 1.0,
            labels: CONDITION_LABELS,
        };
        let mut buf = Vec::new();
        write_relation_csv(&mut buf, &zero).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], ",pocket,vina,qed,sa,logp,lipinski");
        assert_eq!(lines[1], "pocket,0,0,0,0,0,0");

        let mut again = Vec::new();
        write_relation_csv(&mut again, &zero).unwrap();
        assert_eq!(text.as_bytes(), again.as_slice());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let model = toy_model(16, 2, 2, 71);
        let rel = relation_matrix(&model, None, &base_conditions(), 1.0).unwrap();
        let mut buf = Vec::new();
        write_relation_csv(&mut buf, &rel).unwrap();
        let parsed = parse_relation_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed, rel.r);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(matches!(parse_relation_csv(""), Err(AnalysisError::Csv(_))));
        assert!(matches!(
            parse_relation_csv(",a,b,c,d,e,f\n"),
            Err(AnalysisError::Csv(_))
        ));
        let good_header = format!(",{}\npocket,0,0,0\n", CONDITION_LABELS.join(","));
        assert!(matches!(parse_relation_csv(&good_header), Err(AnalysisError::Csv(_))));
    }

    #[test]
    fn exported_file_round_trips_from_disk() {
        let model = toy_model(8, 2, 1, 73);
        let rel = relation_matrix(&model, None, &base_conditions(), 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("relations.csv");
        export_heatmap(&path, &rel).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(parse_relation_csv(&text).unwrap(), rel.r);
    }
}
