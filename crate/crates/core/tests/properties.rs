//! Invariants checked as properties over the public API.

use proptest::prelude::*;

use tempseg_core::attention::{aia_attention, dot_product_attention, AttentionWeights, InnerAttentionWeights};
use tempseg_core::gradcheck::random_tensor;
use tempseg_core::losses::dice_loss;
use tempseg_core::memory::{MemoryEntry, MemoryEvent, ReferenceMemory};
use tempseg_core::metrics::{average_precision, dsc, mae, BBox, Detection};
use tempseg_core::nn::Init;
use tempseg_core::synth::{augment, AugmentParams, Sequence, SequenceSpec};
use tempseg_core::transformer::pool_mask;
use tempseg_core::{ParamStore, Tape, Tensor};

fn binary(bits: &[bool]) -> Tensor {
    Tensor::from_fn([bits.len()], |i| if bits[i] { 1.0 } else { 0.0 })
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0usize..30, 0usize..30, 0usize..12, 0usize..12).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn catheter_stays_inside_the_aorta(seed in 0u64..10_000, tilt in 0usize..5) {
        let mut spec = SequenceSpec::sample(32, 4, seed);
        spec.tilt_deg = tempseg_core::synth::TILT_ANGLES[tilt];
        let seq = Sequence::generate(spec).unwrap();
        for f in &seq.frames {
            for (c, a) in f.catheter_mask.data().iter().zip(f.aorta_mask.data()) {
                prop_assert!(!(*c > 0.5 && *a < 0.5), "frame {}", f.frame_index);
            }
        }
    }

    #[test]
    fn training_frames_always_show_a_catheter(seed in 0u64..10_000) {
        let seq = Sequence::generate(SequenceSpec::sample(32, 6, seed)).unwrap();
        for f in seq.training_frames() {
            prop_assert!(f.catheter_mask.data().iter().any(|&v| v > 0.5));
        }
    }

    #[test]
    fn augmentation_is_pure_and_keeps_masks_binary(seed in 0u64..10_000, rot in -30.0f64..30.0, gain in 0.7f64..1.3) {
        let seq = Sequence::generate(SequenceSpec::sample(32, 1, seed)).unwrap();
        let p = AugmentParams::new(rot, gain, None).unwrap();
        let a = augment(&seq.frames[0], &p);
        prop_assert_eq!(&a, &augment(&seq.frames[0], &p));
        for m in [&a.aorta_mask, &a.catheter_mask] {
            prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn dsc_and_mae_are_symmetric(a in prop::collection::vec(any::<bool>(), 1..64), seed in any::<u64>()) {
        let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
        let (ta, tb) = (binary(&a), binary(&b));
        let d = dsc(&ta, &tb).unwrap();
        prop_assert_eq!(d, dsc(&tb, &ta).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(mae(&ta, &tb).unwrap(), mae(&tb, &ta).unwrap());
    }

    #[test]
    fn dice_loss_is_one_minus_dsc_on_binary_masks(a in prop::collection::vec(any::<bool>(), 1..64), flips in prop::collection::vec(any::<bool>(), 64)) {
        let b: Vec<bool> = a.iter().zip(&flips).map(|(&x, &f)| x ^ f).collect();
        let (ta, tb) = (binary(&a), binary(&b));
        let mut tape = Tape::new();
        let (p, t) = (tape.constant(ta.clone()), tape.constant(tb.clone()));
        let l = dice_loss(&mut tape, p, t, 1e-9).unwrap();
        let loss = tape.value(l).item() as f64;
        prop_assert!((loss - (1.0 - dsc(&ta, &tb).unwrap())).abs() < 1e-5, "loss {loss}");
    }

    #[test]
    fn ap_does_not_increase_with_iou_threshold(
        truths in prop::collection::vec(prop::option::weighted(0.8, bbox()), 1..8),
        dets in prop::collection::vec((0usize..8, 0.0f64..1.0, bbox()), 0..16),
    ) {
        let dets: Vec<Detection> = dets
            .into_iter()
            .map(|(frame, score, bbox)| Detection { frame: frame % truths.len(), score, bbox })
            .collect();
        let mut last = f64::INFINITY;
        for i in 0..=20 {
            let ap = average_precision(&dets, &truths, i as f64 / 20.0);
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!(ap <= last, "AP rose to {ap} at threshold {}", i as f64 / 20.0);
            last = ap;
        }
    }

    #[test]
    fn memory_is_a_bounded_gated_fifo(cap in 1usize..5, threshold in 0.0f64..1.0, dice in prop::collection::vec(0.0f64..=1.0, 0..40)) {
        let mut mem = ReferenceMemory::<f32>::new(cap, threshold).unwrap();
        let mut model: std::collections::VecDeque<usize> = Default::default();
        for (frame, &d) in dice.iter().enumerate() {
            let admitted = mem
                .update(MemoryEntry { frame, features: vec![], mask: Tensor::zeros([1]), dice: d })
                .unwrap();
            prop_assert_eq!(admitted, d >= threshold);
            if admitted {
                if model.len() == cap {
                    model.pop_front();
                }
                model.push_back(frame);
            }
            prop_assert!(mem.len() <= cap);
            prop_assert!(mem.entries().all(|e| e.dice >= threshold));
            prop_assert_eq!(mem.entries().map(|e| e.frame).collect::<Vec<_>>(), model.iter().copied().collect::<Vec<_>>());
        }
        let evicted = mem.trace().iter().filter(|e| matches!(e, MemoryEvent::Evicted { .. })).count();
        let admitted = mem.trace().iter().filter(|e| matches!(e, MemoryEvent::Admitted { .. })).count();
        prop_assert_eq!(admitted - evicted, mem.len());
    }

    #[test]
    fn pooled_masks_keep_their_mean(bits in prop::collection::vec(any::<bool>(), 256), g in 0usize..3) {
        let grid = [1usize, 4, 8][g];
        let m = Tensor::from_fn([16, 16], |i| if bits[i] { 1.0f32 } else { 0.0 });
        let p = pool_mask(&m, (grid, grid)).unwrap();
        prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = |t: &Tensor| t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        prop_assert!((mean(&p) - mean(&m)).abs() < 1e-6);
    }

    #[test]
    fn joint_key_value_permutation_leaves_attention_unchanged(
        seed in 0u64..10_000,
        nq in 1usize..6,
        nk in 2usize..7,
        rot in 1usize..6,
    ) {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(seed);
        let w = AttentionWeights::new(&mut store, &mut init, "a", 4, 2).unwrap();
        let inner = InnerAttentionWeights::per_head(&mut store, &mut init, "a", 2, nq, 5).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for (n, id) in ids.into_iter().enumerate() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = random_tensor(&shape, -1.0, 1.0, seed * 31 + n as u64).with_grad();
        }
        let q = random_tensor::<f64>(&[nq, 4], -1.0, 1.0, seed + 1);
        let k = random_tensor::<f64>(&[nk, 4], -1.0, 1.0, seed + 2);
        let v = random_tensor::<f64>(&[nk, 4], -1.0, 1.0, seed + 3);
        let perm: Vec<usize> = (0..nk).map(|i| (i + rot) % nk).collect();
        let permute = |t: &Tensor<f64>| Tensor::from_fn([nk, 4], |i| t.at(&[perm[i / 4], i % 4]));
        let (kp, vp) = (permute(&k), permute(&v));

        let mut tape = Tape::new();
        let (qv, kv, vv, kpv, vpv) = (
            tape.constant(q),
            tape.constant(k),
            tape.constant(v),
            tape.constant(kp),
            tape.constant(vp),
        );
        for aia in [false, true] {
            let (a, b) = if aia {
                (
                    aia_attention(&mut tape, &store, &w, &inner, qv, kv, vv).unwrap().output,
                    aia_attention(&mut tape, &store, &w, &inner, qv, kpv, vpv).unwrap().output,
                )
            } else {
                (
                    dot_product_attention(&mut tape, &store, &w, qv, kv, vv).unwrap().output,
                    dot_product_attention(&mut tape, &store, &w, qv, kpv, vpv).unwrap().output,
                )
            };
            for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
                prop_assert!((x - y).abs() < 1e-10, "aia={aia}: {x} vs {y}");
            }
        }
    }
}
