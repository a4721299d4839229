use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simt_core::attention::{make_mask, post_mha, pre_mha, AttentionMask, MaskKind, MhaWeights};
use simt_core::audit;
use simt_core::autograd::Graph;
use simt_core::config::{ModelConfig, Variant};
use simt_core::model::frontend::{conv_out_len, subsampled_len};
use simt_core::model::{Model, SOS};
use simt_core::multiplex::{plan_groups, DecoderAttnSharing, DecoderMode, FfnScope, Init, LnSharing, ParamRegistry, SharingMode};
use simt_core::tensor::Tensor;
use simt_core::train::{cer, levenshtein, lr_schedule};
use simt_core::verify;

fn tensor(seed: u64, shape: &[usize], scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn sharing() -> impl Strategy<Value = SharingMode> {
    (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(ln, ffn, dec, att)| SharingMode {
        ln: if ln { LnSharing::Shared } else { LnSharing::PerModule },
        ffn_scope: if ffn { FfnScope::Global } else { FfnScope::PerGroup },
        decoder: if dec { DecoderMode::Simt } else { DecoderMode::Baseline },
        decoder_attn: if att { DecoderAttnSharing::Shared } else { DecoderAttnSharing::Separate },
    })
}

/// Small valid configs: `enc_layers = groups * per_group`.
fn small_config() -> impl Strategy<Value = ModelConfig> {
    (
        prop_oneof![Just(Variant::Simt), Just(Variant::Baseline)],
        1usize..=3,
        1usize..=4,
        1usize..=3,
        (1usize..=3, 1usize..=20, 4usize..=30, 7usize..=20),
        sharing(),
        (any::<bool>(), any::<bool>()),
    )
        .prop_map(|(variant, groups, per, heads, (dec, d_ff, vocab, fd), sharing, (tie, proj))| ModelConfig {
            variant,
            d_model: heads * 4,
            d_ff,
            heads,
            enc_layers: groups * per,
            groups,
            dec_layers: dec,
            vocab_size: vocab,
            feature_dim: fd,
            sharing,
            dropout: 0.0,
            max_len: 64,
            tie_embeddings: tie,
            post_mha_proj: proj,
            seed: 0,
        })
}

fn attention(seed: u64, d: usize, heads: usize) -> MhaWeights<f64> {
    let mut reg = ParamRegistry::new(seed);
    MhaWeights::bind(&mut reg, "att", d, heads).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, shift in -50.0f64..50.0) {
        let x = tensor(seed, &[rows, cols], 20.0);
        let g = Graph::<f64>::new();
        let a = g.softmax(g.constant(x.clone())).unwrap();
        let b = g.softmax(g.constant(x.map(|v| v + shift))).unwrap();
        for row in g.value(a).rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        prop_assert!(g.value(a).max_abs_diff(&g.value(b)).unwrap() <= 1e-12);
    }

    /// A tensor feeding k sites gets the sum of the k single-site gradients.
    #[test]
    fn backward_accumulates_over_use_sites(seed in any::<u64>(), k in 1usize..5) {
        let x = tensor(seed, &[3, 4], 1.0);
        let ws: Vec<Tensor<f64>> = (0..k).map(|i| tensor(seed ^ (i as u64 + 1), &[3, 4], 1.0)).collect();
        let build = |g: &Graph<f64>, live: Option<usize>| {
            let var = g.variable(x.clone());
            let fixed = g.constant(x.clone());
            let mut total = None;
            for (i, w) in ws.iter().enumerate() {
                let src = if live.is_none_or(|l| l == i) { var } else { fixed };
                let term = g.sum(g.mul(g.mul(src, src).unwrap(), g.constant(w.clone())).unwrap());
                total = Some(match total { None => term, Some(t) => g.add(t, term).unwrap() });
            }
            (var, total.unwrap())
        };
        let g = Graph::new();
        let (v, l) = build(&g, None);
        g.backward(l).unwrap();
        let joint = g.grad(v).unwrap();
        let mut summed = Tensor::<f64>::zeros(&[3, 4]);
        for i in 0..k {
            let g = Graph::new();
            let (v, l) = build(&g, Some(i));
            g.backward(l).unwrap();
            for (a, b) in summed.data_mut().iter_mut().zip(g.grad(v).unwrap().data()) {
                *a += b;
            }
        }
        prop_assert!(joint.max_abs_diff(&summed).unwrap() <= 1e-12);
    }

    #[test]
    fn attention_rows_are_stochastic(seed in any::<u64>(), tq in 1usize..7, tk in 1usize..7, valid in 0usize..7, causal in any::<bool>()) {
        // Causal masks are square.
        let tk = if causal { tq } else { tk };
        let valid = valid.min(tk);
        let kind = match (valid < tk, causal) {
            (false, false) => MaskKind::None,
            (true, false) => MaskKind::Padding,
            (false, true) => MaskKind::Causal,
            (true, true) => MaskKind::Both,
        };
        let mask = make_mask(kind, tq, tk, valid).unwrap();
        let w = attention(seed, 8, 2);
        let g = Graph::new();
        let q = g.constant(tensor(seed ^ 1, &[tq, 8], 2.0));
        let kv = g.constant(tensor(seed ^ 2, &[tk, 8], 2.0));
        let (s, _) = pre_mha(&g, q, kv, kv, &w, &mask).unwrap();
        let sv = g.value(s.values);
        for (i, row) in sv.rows().enumerate() {
            let qi = i % tq;
            let total: f64 = row.iter().sum();
            if mask.row_masked(qi) {
                prop_assert!(row.iter().all(|&p| p == 0.0));
            } else {
                prop_assert!((total - 1.0).abs() <= 1e-6);
                for (kj, &p) in row.iter().enumerate() {
                    if !mask.allows(qi, kj) {
                        prop_assert!(p < 1e-300);
                    }
                }
            }
        }
    }

    #[test]
    fn permuting_keys_permutes_score_columns(seed in any::<u64>(), tq in 1usize..6, tk in 2usize..7) {
        let w = attention(seed, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..tk).collect();
        for i in (1..tk).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let q = tensor(seed ^ 3, &[tq, 8], 1.0);
        let kv = tensor(seed ^ 4, &[tk, 8], 1.0);
        let kv_perm = Tensor::from_fn(&[tk, 8], |i| kv.data()[perm[i / 8] * 8 + i % 8]);
        let mask = AttentionMask::none(tq, tk);
        let run = |keys: &Tensor<f64>| {
            let g = Graph::new();
            let (s, _) = pre_mha(&g, g.constant(q.clone()), g.constant(keys.clone()), g.constant(keys.clone()), &w, &mask).unwrap();
            let out = post_mha(&g, &s, g.constant(keys.clone()), &w, false).unwrap();
            ((*g.value(s.values)).clone(), (*g.value(out)).clone())
        };
        let (s0, o0) = run(&kv);
        let (s1, o1) = run(&kv_perm);
        for (r0, r1) in s0.rows().zip(s1.rows()) {
            for (j, &p) in r1.iter().enumerate() {
                prop_assert!((p - r0[perm[j]]).abs() <= 1e-12);
            }
        }
        prop_assert!(o0.max_abs_diff(&o1).unwrap() <= 1e-12);
    }

    #[test]
    fn post_mha_on_own_scores_matches_pre_mha_with_identity_output(seed in any::<u64>(), t in 1usize..7, causal in any::<bool>()) {
        let w = attention(seed, 12, 3);
        w.w_o.param().set_value(Tensor::eye(12)).unwrap();
        w.b_o.param().set_value(Tensor::zeros(&[12])).unwrap();
        let mask = if causal { AttentionMask::causal(t) } else { AttentionMask::none(t, t) };
        let g = Graph::new();
        let x = g.constant(tensor(seed, &[t, 12], 1.0));
        let v = g.constant(tensor(seed ^ 9, &[t, 12], 1.0));
        let (s, pre) = pre_mha(&g, x, x, v, &w, &mask).unwrap();
        let post = post_mha(&g, &s, v, &w, false).unwrap();
        prop_assert!(g.value(pre).max_abs_diff(&g.value(post)).unwrap() <= 1e-6);
    }

    #[test]
    fn causal_attention_ignores_later_rows(seed in any::<u64>(), t in 2usize..8, pos in 0usize..8) {
        let pos = pos % t;
        let w = attention(seed, 8, 2);
        let x = tensor(seed, &[t, 8], 1.0);
        let mut y = x.clone();
        for v in &mut y.data_mut()[(pos + 1) * 8..] {
            *v += 3.0;
        }
        let run = |inp: &Tensor<f64>| {
            let g = Graph::new();
            let c = g.constant(inp.clone());
            let (s, o) = pre_mha(&g, c, c, c, &w, &AttentionMask::causal(t)).unwrap();
            ((*g.value(s.values)).clone(), (*g.value(o)).clone())
        };
        let ((s0, o0), (s1, o1)) = (run(&x), run(&y));
        for (i, (a, b)) in s0.rows().zip(s1.rows()).enumerate() {
            if i % t <= pos {
                prop_assert!(a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
        for (a, b) in o0.rows().zip(o1.rows()).take(pos + 1) {
            prop_assert!(a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn aliasing_never_changes_the_count(binds in proptest::collection::vec(0usize..4, 1..30)) {
        let shapes = [vec![2, 3], vec![5], vec![4, 4], vec![1]];
        let mut reg = ParamRegistry::<f32>::new(1);
        for &b in &binds {
            reg.get_or_bind(&format!("p{b}"), &shapes[b], Init::Zeros).unwrap();
        }
        let mut distinct = binds.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let expected: usize = distinct.iter().map(|&b| shapes[b].iter().product::<usize>()).sum();
        prop_assert_eq!(reg.total(), expected);
        prop_assert_eq!(reg.distinct_params().iter().map(|p| p.binds).sum::<usize>(), binds.len());
    }

    #[test]
    fn group_plans_are_pure(layers in 1usize..40, groups in 1usize..40) {
        let a = plan_groups(layers, groups);
        let b = plan_groups(layers, groups);
        prop_assert_eq!(a.is_ok(), b.is_ok());
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.groups * a.layers_per_group(), layers);
            prop_assert!(a.assignment.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn sharing_norms_strictly_shrinks_the_model(cfg in small_config()) {
        let per = ModelConfig { sharing: SharingMode { ln: LnSharing::PerModule, ..cfg.sharing }, ..cfg.clone() };
        let shared = ModelConfig { sharing: SharingMode { ln: LnSharing::Shared, ..cfg.sharing }, ..cfg.clone() };
        let (a, b) = (audit::count(&per).total(), audit::count(&shared).total());
        // Simt decoder layers always have several norms per type; so do groups of two or more layers.
        let reducible = (cfg.sharing.decoder == DecoderMode::Simt)
            || (cfg.variant == Variant::Simt && cfg.enc_layers > cfg.groups);
        if reducible {
            prop_assert!(b < a);
        } else {
            prop_assert!(b <= a);
        }
    }

    #[test]
    fn closed_form_equals_registry(cfg in small_config()) {
        let model = Model::<f32>::build(&cfg, 5).unwrap();
        let listed = audit::enumerate(&model.distinct_params()).unwrap();
        prop_assert_eq!(audit::count(&cfg), listed);
        prop_assert_eq!(audit::count(&cfg).total(), model.num_params());
    }

    #[test]
    fn count_grows_with_every_size_knob(cfg in small_config()) {
        let base = audit::count(&cfg).total();
        let more_dec = ModelConfig { dec_layers: cfg.dec_layers + 1, ..cfg.clone() };
        let more_vocab = ModelConfig { vocab_size: cfg.vocab_size + 1, ..cfg.clone() };
        prop_assert!(audit::count(&more_dec).total() > base);
        prop_assert!(audit::count(&more_vocab).total() > base);
        if cfg.variant == Variant::Simt {
            let per = cfg.enc_layers / cfg.groups;
            let more_groups = ModelConfig { groups: cfg.groups + 1, enc_layers: (cfg.groups + 1) * per, ..cfg.clone() };
            prop_assert!(audit::count(&more_groups).total() > base);
            let same_layers_more_groups = ModelConfig { groups: cfg.enc_layers, ..cfg.clone() };
            if cfg.groups < cfg.enc_layers {
                prop_assert!(audit::count(&same_layers_more_groups).total() > base);
            }
        } else {
            let more_layers = ModelConfig { enc_layers: cfg.enc_layers + 1, ..cfg.clone() };
            prop_assert!(audit::count(&more_layers).total() > base);
        }
    }

    #[test]
    fn shapes_follow_input_lengths(cfg in small_config(), frames in 7usize..40, len in 1usize..10, seed in any::<u64>()) {
        let model = Model::<f32>::build(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = verify::random_features::<f32>(&mut rng, frames, cfg.feature_dim);
        let mut tokens = vec![SOS];
        tokens.extend(verify::random_labels(&mut rng, len, cfg.vocab_size));
        let g = Graph::new();
        let mem = model.encode(&g, &feats).unwrap();
        prop_assert_eq!(g.shape(mem.x), vec![subsampled_len(frames), cfg.d_model]);
        let logits = model.decoder_forward(&g, mem, &tokens).unwrap();
        prop_assert_eq!(g.shape(logits), vec![len + 1, cfg.vocab_size]);
    }

    #[test]
    fn builds_are_bit_identical_per_seed(cfg in small_config(), seed in any::<u64>()) {
        let grads = |m: &Model<f64>| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats = verify::random_features::<f64>(&mut rng, 16, cfg.feature_dim);
            let labels = verify::random_labels(&mut rng, 3, cfg.vocab_size);
            let g = Graph::new();
            let l = m.loss(&g, &feats, &labels, 0.1).unwrap();
            g.backward(l).unwrap();
            m.params().iter().map(|h| ((*h.param().value()).clone(), h.param().grad())).collect::<Vec<_>>()
        };
        let a = grads(&Model::build(&cfg, seed).unwrap());
        let b = grads(&Model::build(&cfg, seed).unwrap());
        for ((va, ga), (vb, gb)) in a.iter().zip(&b) {
            prop_assert!(va.data().iter().zip(vb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn edit_distance_is_a_metric(a in proptest::collection::vec(0u8..4, 0..12), b in proptest::collection::vec(0u8..4, 0..12), c in proptest::collection::vec(0u8..4, 0..12)) {
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        prop_assert!(levenshtein(&a, &b) <= a.len().max(b.len()));
        if !a.is_empty() {
            prop_assert_eq!(cer(&a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn schedule_peaks_at_warmup(d in 1usize..1024, warmup in 1usize..3000, scale in 0.01f64..10.0) {
        let peak = lr_schedule(warmup, d, warmup, scale).unwrap();
        let expected = scale / ((d as f64).sqrt() * (warmup as f64).sqrt());
        prop_assert!((peak - expected).abs() <= 1e-12 * expected);
        for s in [1, warmup.saturating_sub(1).max(1), warmup + 1, 2 * warmup + 7] {
            prop_assert!(lr_schedule(s, d, warmup, scale).unwrap() <= peak * (1.0 + 1e-12));
        }
    }

    #[test]
    fn conv_lengths_are_monotone(n in 0usize..500) {
        prop_assert!(conv_out_len(n) <= conv_out_len(n + 1));
        prop_assert!(subsampled_len(n) <= subsampled_len(n + 1));
        prop_assert!(subsampled_len(n) * 4 <= n);
    }
}
