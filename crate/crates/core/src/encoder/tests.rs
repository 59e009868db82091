use super::*;
use crate::injection::{top_layers, InjectionConfig};
use crate::numeric::{gelu_scalar, GradCheckOptions, Tape};

fn tiny_config(layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden: 8,
        intermediate: 12,
        num_heads: 2,
        vocab_size: 20,
        max_seq_len: 16,
        seed: 11,
    }
}

fn tiny(layers: usize, injection: InjectionConfig) -> Model<f64> {
    Model::new(tiny_config(layers), injection).unwrap()
}

fn seq(ids: &[usize]) -> TokenSequence {
    TokenSequence::new(ids.to_vec())
}

// Plain-loop reference implementation used as an oracle.
mod reference {
    pub type Mat = Vec<Vec<f64>>;

    pub fn mm_nt(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .map(|r| b.iter().map(|c| r.iter().zip(c).map(|(x, y)| x * y).sum()).collect())
            .collect()
    }

    pub fn mm(a: &Mat, b: &Mat) -> Mat {
        let n = b[0].len();
        a.iter()
            .map(|r| {
                (0..n)
                    .map(|j| r.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    pub fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn softmax(r: &[f64]) -> Vec<f64> {
        let m = r.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
            .collect()
    }

    pub fn cols(a: &Mat, lo: usize, hi: usize) -> Mat {
        a.iter().map(|r| r[lo..hi].to_vec()).collect()
    }

    pub fn attention(h: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, wo: &Mat, heads: usize) -> Mat {
        let q = mm_nt(h, wq);
        let k = mm_nt(h, wk);
        let v = mm_nt(h, wv);
        let d = q[0].len();
        let dh = d / heads;
        let mut merged = vec![vec![0.0; d]; h.len()];
        for hd in 0..heads {
            let (qh, kh, vh) = (cols(&q, hd * dh, (hd + 1) * dh), cols(&k, hd * dh, (hd + 1) * dh), cols(&v, hd * dh, (hd + 1) * dh));
            let scores = mm_nt(&qh, &kh);
            let p: Mat = scores
                .iter()
                .map(|r| softmax(&r.iter().map(|x| x / (dh as f64).sqrt()).collect::<Vec<_>>()))
                .collect();
            let o = mm(&p, &vh);
            for (i, row) in o.iter().enumerate() {
                merged[i][hd * dh..(hd + 1) * dh].copy_from_slice(row);
            }
        }
        mm_nt(&merged, wo)
    }

    pub fn ffn(h: &Mat, k: &Mat, v: &Mat) -> Mat {
        let a: Mat = mm_nt(h, k).iter().map(|r| r.iter().map(|&x| gelu(x)).collect()).collect();
        mm(&a, v)
    }
}

fn mat(t: &Tensor<f64>) -> reference::Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn param_mat(m: &Model<f64>, name: &str) -> reference::Mat {
    mat(&m.params().by_name(name).unwrap().value)
}

fn param_vec(m: &Model<f64>, name: &str) -> Vec<f64> {
    m.params().by_name(name).unwrap().value.data().to_vec()
}

#[test]
fn config_validation() {
    let mut c = tiny_config(2);
    c.num_heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny_config(2);
    c.intermediate = 4;
    assert!(c.validate().is_err());
    let mut c = tiny_config(2);
    c.hidden = 0;
    assert!(c.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn embed_tokens_contracts() {
    let m = tiny(1, InjectionConfig::none());
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape);
    let one = m.embed_tokens(&mut tape, &vars, &seq(&[2])).unwrap();
    assert_eq!(tape.value(one).shape(), &[1, 8]);
    let two = m.embed_tokens(&mut tape, &vars, &seq(&[5, 5])).unwrap();
    let t = tape.value(two);
    assert_ne!(t.row(0), t.row(1));
    assert!(matches!(
        m.embed_tokens(&mut tape, &vars, &seq(&[20])),
        Err(ModelError::Input(_))
    ));
    assert!(matches!(
        m.embed_tokens(&mut tape, &vars, &seq(&[])),
        Err(ModelError::Input(_))
    ));
    assert!(m.embed_tokens(&mut tape, &vars, &seq(&[1; 17])).is_err());
}

#[test]
fn same_seed_gives_identical_embeddings() {
    let run = || {
        let m = tiny(2, InjectionConfig::none());
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let e = m.embed_tokens(&mut tape, &vars, &seq(&[2, 7, 3, 9])).unwrap();
        tape.value(e).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn singleton_attention_is_value_then_output_projection() {
    let m = tiny(1, InjectionConfig::none());
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape);
    let mut rng = crate::numeric::seeded_rng(4);
    let h = tape.constant(Tensor::randn(&[1, 8], 1.0, &mut rng));
    let (out, weights) = self_attention_with_weights(&mut tape, h, &vars.layers[0]).unwrap();
    for w in weights {
        assert_eq!(tape.value(w).data(), &[1.0]);
    }
    let l = &vars.layers[0];
    let v = tape.value(h).matmul_nt(tape.value(l.value)).unwrap();
    let expected = v.matmul_nt(tape.value(l.output)).unwrap();
    assert!(tape.value(out).max_abs_diff(&expected) < 1e-15);
}

#[test]
fn attention_weights_are_row_stochastic() {
    let m = tiny(1, InjectionConfig::none());
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape);
    let mut rng = crate::numeric::seeded_rng(5);
    let h = tape.constant(Tensor::randn(&[5, 8], 3.0, &mut rng));
    let (_, weights) = self_attention_with_weights(&mut tape, h, &vars.layers[0]).unwrap();
    assert_eq!(weights.len(), 2);
    for w in weights {
        let t = tape.value(w);
        for i in 0..t.rows() {
            assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn two_token_single_head_attention_oracle() {
    let config = ModelConfig {
        num_layers: 1,
        hidden: 2,
        intermediate: 2,
        num_heads: 1,
        vocab_size: 4,
        max_seq_len: 4,
        seed: 0,
    };
    let mut m = Model::<f64>::new(config, InjectionConfig::none()).unwrap();
    let eye = Tensor::eye(2);
    for name in ["attn.query", "attn.key", "attn.value", "attn.output"] {
        m.set_param(&format!("layer.1.{name}"), eye.clone()).unwrap();
    }
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape);
    let h = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap());
    let out = self_attention(&mut tape, h, &vars.layers[0]).unwrap();
    // token 0: scores (1, 0)/sqrt2; token 1: scores (0, 4)/sqrt2
    let s = 1.0 / 2f64.sqrt();
    let p0 = 1.0 / (1.0 + (-s).exp());
    let p1 = 1.0 / (1.0 + (4.0 * s).exp());
    let expected = [[p0, 2.0 * (1.0 - p0)], [p1, 2.0 * (1.0 - p1)]];
    let o = tape.value(out);
    for i in 0..2 {
        for j in 0..2 {
            assert!((o.get(i, j) - expected[i][j]).abs() < 1e-14);
        }
    }
}

#[test]
fn ffn_zero_keys_give_zero() {
    let mut m = tiny(1, InjectionConfig::none());
    m.set_param("layer.1.ffn.key", Tensor::zeros(&[12, 8])).unwrap();
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape);
    let mut rng = crate::numeric::seeded_rng(6);
    let h = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
    let out = ffn_forward(&mut tape, h, &vars.layers[0]).unwrap();
    assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
}

#[test]
fn scalar_key_value_memory() {
    let config = ModelConfig {
        num_layers: 1,
        hidden: 1,
        intermediate: 1,
        num_heads: 1,
        vocab_size: 4,
        max_seq_len: 4,
        seed: 0,
    };
    let mut m = Model::<f64>::new(config, InjectionConfig::none()).unwrap();
    m.set_param("layer.1.ffn.key", Tensor::full(&[1, 1], 1.0)).unwrap();
    m.set_param("layer.1.ffn.value", Tensor::full(&[1, 1], 1.0)).unwrap();
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape);
    let h = tape.constant(Tensor::from_rows(&[[0.5], [-2.0], [3.0]]).unwrap());
    let out = ffn_forward(&mut tape, h, &vars.layers[0]).unwrap();
    for (o, x) in tape.value(out).data().iter().zip([0.5, -2.0, 3.0]) {
        assert_eq!(*o, gelu_scalar(x));
    }
}

#[test]
fn ffn_is_a_sum_over_memory_slots() {
    let m = tiny(1, InjectionConfig::none());
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape);
    let mut rng = crate::numeric::seeded_rng(8);
    let h = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
    let hv = tape.constant(h.clone());
    let out = ffn_forward(&mut tape, hv, &vars.layers[0]).unwrap();
    let k = param_mat(&m, "layer.1.ffn.key");
    let v = param_mat(&m, "layer.1.ffn.value");
    for t in 0..4 {
        let mut acc = vec![0.0; 8];
        for slot in 0..12 {
            let a = gelu_scalar(h.row(t).iter().zip(&k[slot]).map(|(x, y)| x * y).sum::<f64>());
            for j in 0..8 {
                acc[j] += a * v[slot][j];
            }
        }
        for j in 0..8 {
            assert!((tape.value(out).get(t, j) - acc[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn one_layer_encode_matches_reference() {
    let m = tiny(1, InjectionConfig::none());
    let ids = [2usize, 7, 3, 11, 3];
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape);
    let out = m.encode(&mut tape, &vars, &seq(&ids), None).unwrap();

    use reference::*;
    let tok = param_mat(&m, "embeddings.token");
    let pos = param_mat(&m, "embeddings.position");
    let x: Mat = ids
        .iter()
        .enumerate()
        .map(|(p, &id)| tok[id].iter().zip(&pos[p]).map(|(a, b)| a + b).collect())
        .collect();
    let h = layer_norm(&x, &param_vec(&m, "layer.1.norm1.gamma"), &param_vec(&m, "layer.1.norm1.beta"));
    let a = attention(
        &h,
        &param_mat(&m, "layer.1.attn.query"),
        &param_mat(&m, "layer.1.attn.key"),
        &param_mat(&m, "layer.1.attn.value"),
        &param_mat(&m, "layer.1.attn.output"),
        2,
    );
    let x = add(&x, &a);
    let h = layer_norm(&x, &param_vec(&m, "layer.1.norm2.gamma"), &param_vec(&m, "layer.1.norm2.beta"));
    let f = ffn(&h, &param_mat(&m, "layer.1.ffn.key"), &param_mat(&m, "layer.1.ffn.value"));
    let x = add(&x, &f);
    let y = layer_norm(&x, &param_vec(&m, "final_norm.gamma"), &param_vec(&m, "final_norm.beta"));

    let got = tape.value(out);
    assert_eq!(got.shape(), &[5, 8]);
    for i in 0..5 {
        for j in 0..8 {
            assert!((got.get(i, j) - y[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_injection_matches_plain_model_bit_for_bit() {
    let plain = tiny(3, InjectionConfig::none());
    let injected = tiny(
        3,
        InjectionConfig {
            layers: top_layers(3, 2),
            ..InjectionConfig::default()
        },
    );
    let s = seq(&[2, 5, 6, 3, 9]);
    let run = |m: &Model<f64>, slots_n0: bool| {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let slots = if slots_n0 {
            let mut slots = KnowledgeSlots::new(0);
            let empty = tape.constant(Tensor::zeros(&[0, 8]));
            for l in m.injection().layers.iter().copied() {
                slots.insert(l, empty, empty);
            }
            Some(slots)
        } else {
            None
        };
        let out = m.encode(&mut tape, &vars, &s, slots.as_ref()).unwrap();
        tape.value(out).clone()
    };
    let a = run(&plain, false);
    assert_eq!(a, run(&injected, false));
    assert_eq!(a, run(&injected, true));
}

#[test]
fn slots_on_unknown_layer_are_rejected() {
    let m = tiny(2, InjectionConfig::default_for(2));
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape);
    let z = tape.constant(Tensor::zeros(&[1, 8]));
    let mut slots = KnowledgeSlots::new(1);
    slots.insert(3, z, z);
    assert!(matches!(
        m.encode(&mut tape, &vars, &seq(&[2, 3]), Some(&slots)),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn zero_position_embeddings_make_encoder_permutation_equivariant() {
    let mut m = tiny(2, InjectionConfig::none());
    m.set_param("embeddings.position", Tensor::zeros(&[16, 8])).unwrap();
    let ids = [4usize, 9, 13, 6];
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<usize> = perm.iter().map(|&p| ids[p]).collect();
    let run = |ids: &[usize]| {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let out = m.encode(&mut tape, &vars, &seq(ids), None).unwrap();
        tape.value(out).clone()
    };
    let a = run(&ids);
    let b = run(&permuted);
    for (i, &p) in perm.iter().enumerate() {
        for j in 0..8 {
            assert!((b.get(i, j) - a.get(p, j)).abs() < 1e-9);
        }
    }
}

fn toy_input() -> McqInput {
    McqInput {
        question: vec![5, 6, 7],
        options: vec![vec![8], vec![9, 10], vec![11]],
        knowledge: vec![vec![5, 8, 12], vec![6, 9], vec![13, 14, 15, 16]],
    }
}

#[test]
fn mcq_score_is_a_distribution_and_symmetric() {
    for mode in FusionMode::ALL {
        let inj = InjectionConfig {
            mode,
            layers: if mode.uses_slots() { top_layers(2, 1) } else { Default::default() },
            ..InjectionConfig::default()
        };
        let m = tiny(2, inj);
        let input = toy_input();
        let p = m.mcq_score(&input, 2, 3).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let same = McqInput {
            options: vec![vec![8], vec![8], vec![8]],
            ..input.clone()
        };
        let u = m.mcq_score(&same, 2, 3).unwrap();
        assert!(u.iter().all(|&x| x == u[0]));

        let reordered = McqInput {
            options: vec![input.options[2].clone(), input.options[0].clone(), input.options[1].clone()],
            ..input.clone()
        };
        let q = m.mcq_score(&reordered, 2, 3).unwrap();
        assert!((q[0] - p[2]).abs() < 1e-12 && (q[1] - p[0]).abs() < 1e-12 && (q[2] - p[1]).abs() < 1e-12);
    }
}

#[test]
fn mcq_needs_two_options() {
    let m = tiny(1, InjectionConfig::none());
    let input = McqInput {
        options: vec![vec![8]],
        ..toy_input()
    };
    assert!(matches!(m.mcq_score(&input, 2, 3), Err(ModelError::Input(_))));
}

#[test]
fn full_mcq_loss_gradients_match_finite_differences() {
    let mut m = tiny(2, InjectionConfig::default_for(2));
    let input = toy_input();
    let report = m
        .grad_check(&GradCheckOptions::default(), |model, vars, tape| {
            model.mcq_loss(tape, vars, &input, 1, 2, 3)
        })
        .unwrap();
    assert!(report.max_rel_error < 1e-4, "{:?}", report.worst);
    assert!(report
        .params
        .iter()
        .any(|p| p.name.contains("inject") && p.nonzero_coords > 0));
}
