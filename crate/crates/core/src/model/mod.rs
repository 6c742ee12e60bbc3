//! Embeddings, the shared encoder stack, and the four decoder strategies.

pub mod checkpoint;
mod config;
mod network;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{default_partition, DecoderStrategy, ModelConfig};
pub use network::{argmax, position_encoding, sequential_input, teacher_forcing, EncodedInput, Memory, Model};
pub use params::{attention_module_size, ParamStore};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FocusConfig;
    use crate::data::{ExampleTriple, BOS, EOS, SEP};
    use crate::tensor::{finite_diff_check, Tensor};
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(strategy: DecoderStrategy, vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            ffn_dim: 12,
            encoder_layers: 2,
            decoder_layers: 2,
            strategy,
            ..ModelConfig::default()
        }
    }

    fn random_example(rng: &mut ChaCha8Rng, vocab: usize, with_context: bool) -> ExampleTriple {
        let mut seq = |lo: usize, hi: usize| -> Vec<usize> {
            let n = rng.gen_range(lo..=hi);
            (0..n).map(|_| rng.gen_range(5..vocab)).collect()
        };
        let s = seq(1, 4);
        let c = if with_context { seq(1, 5) } else { Vec::new() };
        let t = seq(1, 4);
        ExampleTriple::new(s, c, t)
    }

    #[test]
    fn parameter_counts_match_across_strategies() {
        for (d, l_e, l_d, f) in [(8, 2, 2, 12), (16, 3, 6, 32), (12, 1, 4, 7)] {
            let count = |s| {
                let cfg = ModelConfig {
                    vocab_size: 30,
                    d_model: d,
                    ffn_dim: f,
                    encoder_layers: l_e,
                    decoder_layers: l_d,
                    strategy: s,
                    ..ModelConfig::default()
                };
                Model::new(cfg.clone(), 1).unwrap().param_count()
            };
            let base = count(DecoderStrategy::Sequential);
            assert_eq!(count(DecoderStrategy::Concatenate), base);
            assert_eq!(count(DecoderStrategy::Interleave), base);
            let cfg = ModelConfig {
                d_model: d,
                ..ModelConfig::default()
            };
            assert_eq!(
                count(DecoderStrategy::Alternate),
                base + l_d * attention_module_size(&cfg)
            );
        }
    }

    #[test]
    fn logits_are_causal_for_every_strategy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in DecoderStrategy::ALL {
            let m = Model::new(tiny(s, 20), 5).unwrap();
            let ex = random_example(&mut rng, 20, true);
            let input: Vec<usize> = vec![BOS, 7, 8, 9, 10];
            let base = m.logits(&ex.source, &ex.context, &input).unwrap();
            for t in 1..input.len() {
                let mut changed = input.clone();
                changed[t] = 11 + t;
                let other = m.logits(&ex.source, &ex.context, &changed).unwrap();
                for pos in 0..t {
                    assert_eq!(base.row(pos), other.row(pos), "{s} position {pos} saw {t}");
                }
                assert_ne!(base.row(t), other.row(t));
            }
        }
    }

    #[test]
    fn encode_contracts() {
        let m = Model::new(tiny(DecoderStrategy::Interleave, 20), 2).unwrap();
        let x = [5, 9, 12, 6];
        let a = m.encode(&x, false).unwrap();
        assert_eq!(a.shape(), &[4, 8]);
        assert_eq!(a, m.encode(&x, false).unwrap());
        assert_eq!(a, m.encode(&x, true).unwrap());
        assert!(matches!(m.encode(&[], false), Err(Error::Input(_))));
        assert!(matches!(m.encode(&[5, 20], false), Err(Error::Vocab(_))));

        let mut cfg = tiny(DecoderStrategy::Interleave, 20);
        cfg.focus = FocusConfig::new(4.0, 1.0);
        let f = Model::new(cfg, 2).unwrap();
        assert_eq!(f.encode(&x, false).unwrap(), a);
        assert_ne!(f.encode(&x, true).unwrap(), a);
    }

    #[test]
    fn suppressed_null_context_reduces_concatenate_to_source_only() {
        let mut m = Model::new(tiny(DecoderStrategy::Concatenate, 20), 4).unwrap();
        m.suppress_null_context = true;
        let (s, input) = ([6, 7, 8], [BOS, 9, 10]);
        let a = m.logits(&s, &[], &input).unwrap();
        let b = m.source_only_logits(&s, &input).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        m.suppress_null_context = false;
        assert!(m.logits(&s, &[], &input).unwrap().max_abs_diff(&b) > 1e-9);
    }

    #[test]
    fn zero_embeddings_give_uniform_loss() {
        let mut m = Model::new(tiny(DecoderStrategy::Concatenate, 20), 4).unwrap();
        let id = m.params.id("embed").unwrap();
        m.params.set(id, Tensor::zeros(&[20, 8])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<_> = (0..3).map(|_| random_example(&mut rng, 20, true)).collect();
        let (loss, n) = m.forward_loss(&batch).unwrap();
        assert!((loss - 20f64.ln()).abs() < 1e-12);
        assert_eq!(n, batch.iter().map(|e| e.target.len() + 1).sum::<usize>());
        assert!(matches!(m.forward_loss(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for s in DecoderStrategy::ALL {
            let m = Model::new(tiny(s, 20), 11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let batch = vec![random_example(&mut rng, 20, true), random_example(&mut rng, 20, false)];
            let (_, _, grads) = m.loss_and_grads(&batch).unwrap();
            for name in [
                "embed",
                "null_context",
                "decoder.1.cross_attn.k",
                "encoder.0.ff.w1",
                "decoder.0.self_norm.gamma",
            ] {
                let id = m.params.id(name).unwrap();
                let err = finite_diff_check(
                    |theta| {
                        let mut probe = m.clone();
                        probe.params.set(id, theta.clone())?;
                        Ok(probe.forward_loss(&batch)?.0)
                    },
                    m.params.get(id),
                    &grads[id],
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "{s} {name}: {err}");
            }
        }
    }

    #[test]
    fn every_active_parameter_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for s in DecoderStrategy::ALL {
            let m = Model::new(tiny(s, 20), 9).unwrap();
            let batch: Vec<_> = (0..4).map(|_| random_example(&mut rng, 20, true)).collect();
            let (_, _, grads) = m.loss_and_grads(&batch).unwrap();
            for (id, name) in m.params.names().iter().enumerate() {
                let norm = grads[id].sq_norm().sqrt();
                if name == "null_context" {
                    assert_eq!(norm, 0.0, "{s}");
                } else {
                    assert!(norm > 1e-12, "{s} {name}");
                }
            }
        }
    }

    #[test]
    fn sequential_joins_with_separator() {
        assert_eq!(sequential_input(&[5, 6], &[7]), vec![5, 6, SEP, 7]);
        assert_eq!(sequential_input(&[5], &[]), vec![5, SEP]);
        assert_eq!(teacher_forcing(&[8, 9]), (vec![BOS, 8, 9], vec![8, 9, EOS]));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Model::new(tiny(DecoderStrategy::Alternate, 20), 21).unwrap();
        let meta = serde_json::json!({"note": "x", "hash": "abc"});
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, &meta).unwrap();
        let (back, meta2) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back.config(), m.config());
        assert!(back.params == m.params);
        let input = [BOS, 6, 7];
        let a = m.logits(&[5, 6], &[7, 8, 9], &input).unwrap();
        let b = back.logits(&[5, 6], &[7, 8, 9], &input).unwrap();
        assert_eq!(a.data(), b.data());

        assert!(matches!(
            read_checkpoint(&buf[..buf.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn warm_start_respects_parameter_sets() {
        let seq = Model::new(tiny(DecoderStrategy::Sequential, 20), 1).unwrap();
        let mut inter = Model::new(tiny(DecoderStrategy::Interleave, 20), 2).unwrap();
        inter.warm_start_from(&seq).unwrap();
        assert!(inter.params == seq.params);
        let mut alt = Model::new(tiny(DecoderStrategy::Alternate, 20), 2).unwrap();
        assert!(matches!(alt.warm_start_from(&seq), Err(Error::Checkpoint(_))));
        let mut wide = tiny(DecoderStrategy::Concatenate, 20);
        wide.ffn_dim = 13;
        let mut wide = Model::new(wide, 3).unwrap();
        assert!(wide.warm_start_from(&seq).is_err());
    }

    /// Plain-matrix reimplementation of the interleave forward pass.
    mod straight_line {
        use super::*;

        fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
            a.iter()
                .map(|r| {
                    (0..b[0].len())
                        .map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                        .collect()
                })
                .collect()
        }

        fn mat(t: &Tensor) -> Vec<Vec<f64>> {
            let (r, c) = t.dims2();
            (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
        }

        fn softmax(row: &[f64]) -> Vec<f64> {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        }

        fn attn(m: &Model, p: &str, x: &[Vec<f64>], mem: &[Vec<f64>], causal: bool) -> Vec<Vec<f64>> {
            let w = |n: &str| mat(m.params.by_name(&format!("{p}.{n}")).unwrap());
            let q = mm(x, &w("q"));
            let k = mm(mem, &w("k"));
            let v = mm(mem, &w("v"));
            let mut out = Vec::new();
            for (i, qi) in q.iter().enumerate() {
                let scores: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum()).collect();
                let visible = if causal { i + 1 } else { k.len() };
                let a = softmax(&scores[..visible]);
                let mut row = vec![0.0; v[0].len()];
                for (j, aj) in a.iter().enumerate() {
                    row.iter_mut().zip(&v[j]).for_each(|(r, vj)| *r += aj * vj);
                }
                out.push(row);
            }
            mm(&out, &w("o"))
        }

        fn add_norm(m: &Model, p: &str, x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let g = m.params.by_name(&format!("{p}.gamma")).unwrap().data();
            let b = m.params.by_name(&format!("{p}.beta")).unwrap().data();
            x.iter()
                .zip(y)
                .map(|(xr, yr)| {
                    let s: Vec<f64> = xr.iter().zip(yr).map(|(a, b)| a + b).collect();
                    let mean = s.iter().sum::<f64>() / s.len() as f64;
                    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64;
                    let rs = 1.0 / (var + 1e-5).sqrt();
                    s.iter()
                        .enumerate()
                        .map(|(j, v)| g[j] * (v - mean) * rs + b[j])
                        .collect()
                })
                .collect()
        }

        fn ff(m: &Model, p: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let w = |n: &str| m.params.by_name(&format!("{p}.{n}")).unwrap();
            let mut h = mm(x, &mat(w("w1")));
            for r in &mut h {
                r.iter_mut()
                    .zip(w("b1").data())
                    .for_each(|(v, b)| *v = (*v + b).max(0.0));
            }
            let mut o = mm(&h, &mat(w("w2")));
            for r in &mut o {
                r.iter_mut().zip(w("b2").data()).for_each(|(v, b)| *v += b);
            }
            o
        }

        fn embed(m: &Model, ids: &[usize]) -> Vec<Vec<f64>> {
            let e = m.params.by_name("embed").unwrap();
            let d = e.cols();
            ids.iter()
                .enumerate()
                .map(|(pos, &id)| {
                    (0..d)
                        .map(|i| {
                            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                            let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                            e.get(id, i) * (d as f64).sqrt() + pe
                        })
                        .collect()
                })
                .collect()
        }

        fn encode(m: &Model, ids: &[usize]) -> Vec<Vec<f64>> {
            let mut x = embed(m, ids);
            for l in 0..m.config().encoder_layers {
                let p = format!("encoder.{l}");
                let a = attn(m, &format!("{p}.self_attn"), &x, &x, false);
                let y = add_norm(m, &format!("{p}.self_norm"), &x, &a);
                let f = ff(m, &format!("{p}.ff"), &y);
                x = add_norm(m, &format!("{p}.ff_norm"), &y, &f);
            }
            x
        }

        pub fn loss(m: &Model, batch: &[ExampleTriple]) -> f64 {
            let src_layers = m.config().source_mask().unwrap();
            let (mut total, mut n) = (0.0, 0);
            for ex in batch {
                let es = encode(m, &ex.source);
                let ec = if ex.context.is_empty() {
                    mat(m.params.by_name("null_context").unwrap())
                } else {
                    encode(m, &ex.context)
                };
                let (input, labels) = teacher_forcing(&ex.target);
                let mut x = embed(m, &input);
                for (l, &to_src) in src_layers.iter().enumerate() {
                    let p = format!("decoder.{l}");
                    let a = attn(m, &format!("{p}.self_attn"), &x, &x, true);
                    let y = add_norm(m, &format!("{p}.self_norm"), &x, &a);
                    let mem = if to_src { &es } else { &ec };
                    let c = attn(m, &format!("{p}.cross_attn"), &y, mem, false);
                    let y = add_norm(m, &format!("{p}.cross_norm"), &y, &c);
                    let f = ff(m, &format!("{p}.ff"), &y);
                    x = add_norm(m, &format!("{p}.ff_norm"), &y, &f);
                }
                let e = mat(m.params.by_name("embed").unwrap());
                for (row, &t) in x.iter().zip(&labels) {
                    let logits: Vec<f64> = e
                        .iter()
                        .map(|er| row.iter().zip(er).map(|(a, b)| a * b).sum())
                        .collect();
                    total -= softmax(&logits)[t].ln();
                    n += 1;
                }
            }
            total / n as f64
        }
    }

    #[test]
    fn loss_matches_straight_line_reimplementation() {
        let mut cfg = tiny(DecoderStrategy::Interleave, 16);
        cfg.decoder_layers = 3;
        let m = Model::new(cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let batch: Vec<_> = (0..4).map(|i| random_example(&mut rng, 16, i != 2)).collect();
        let (loss, _) = m.forward_loss(&batch).unwrap();
        let oracle = straight_line::loss(&m, &batch);
        assert!((loss - oracle).abs() < 1e-10, "{loss} vs {oracle}");
    }
}
