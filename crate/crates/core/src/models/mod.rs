//! Client models: MLP building blocks, the two-branch model with its
//! invariant/specific partition, and the single-branch baseline.

pub mod checkpoint;
mod mlp;
mod params;
mod single_branch;
mod two_branch;

pub use mlp::{Activation, BoundMlp, MlpSpec};
pub use params::{Component, ParamVector, PartitionMasks};
pub use single_branch::{BoundSingleBranch, SingleBranchArch, SingleBranchModel};
pub use two_branch::{BoundTwoBranch, ModelSpec, Segment, Trainable, TwoBranchArch, TwoBranchModel};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    fn small_spec() -> ModelSpec {
        ModelSpec {
            input_dim: 5,
            hidden: vec![6],
            rep_c: 3,
            rep_s: 2,
            predictor_hidden: vec![4],
            n_classes: 3,
            stats_hidden: 4,
        }
    }

    fn batch(rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let arch = TwoBranchArch::new(small_spec()).unwrap();
        let a = TwoBranchModel::<f64>::init(arch.clone(), 11);
        let b = TwoBranchModel::<f64>::init(arch.clone(), 11);
        let c = TwoBranchModel::<f64>::init(arch, 12);
        assert_eq!(a.params(), b.params());
        assert!(a.params().iter().zip(c.params()).any(|(x, y)| x != y));
    }

    #[test]
    fn partition_covers_encoder_c_only() {
        let arch = TwoBranchArch::new(small_spec()).unwrap();
        let inv = arch.masks().invariant();
        let r = arch.range(Segment::EncoderC);
        assert_eq!(inv, &r.clone().collect::<Vec<_>>()[..]);
        assert_eq!(arch.masks().full_len(), arch.full_len());
        assert_eq!(arch.masks().specific().len(), arch.full_len() - r.len());
    }

    #[test]
    fn zero_rep_width_rejected() {
        let mut spec = small_spec();
        spec.rep_s = 0;
        assert!(TwoBranchArch::new(spec).is_err());
    }

    #[test]
    fn flatten_unflatten_identity() {
        let arch = TwoBranchArch::new(small_spec()).unwrap();
        let m = TwoBranchModel::<f64>::init(arch.clone(), 3);
        let back = TwoBranchModel::unflatten(arch, &m.flatten()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn forward_shapes() {
        let arch = TwoBranchArch::new(small_spec()).unwrap();
        let m = TwoBranchModel::<f64>::init(arch, 3);
        for rows in [1, 32] {
            let mut tape = Tape::new();
            let x = tape.constant(batch(rows, 5));
            let (rc, rs, logits) = m.forward(&mut tape, x).unwrap();
            assert_eq!(tape.shape(rc), &[rows, 3]);
            assert_eq!(tape.shape(rs), &[rows, 2]);
            assert_eq!(tape.shape(logits), &[rows, 3]);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let arch = TwoBranchArch::new(small_spec()).unwrap();
        let m = TwoBranchModel::<f64>::init(arch, 3);
        let mut tape = Tape::new();
        let x = tape.constant(batch(2, 4));
        assert!(m.forward(&mut tape, x).is_err());
    }

    #[test]
    fn zero_predictor_gives_zero_logits() {
        let arch = TwoBranchArch::new(small_spec()).unwrap();
        let mut m = TwoBranchModel::<f64>::init(arch, 3);
        m.segment_mut(Segment::Predictor).fill(0.0);
        let mut tape = Tape::new();
        let x = tape.constant(batch(7, 5));
        let (_, _, logits) = m.forward(&mut tape, x).unwrap();
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combine_based_reconstruction_matches_direct_forward() {
        let arch = TwoBranchArch::new(small_spec()).unwrap();
        let m = TwoBranchModel::<f64>::init(arch.clone(), 9);
        let (inv, spec) = arch.masks().split(&m.flatten()).unwrap();
        let rebuilt = TwoBranchModel::unflatten(arch.clone(), &arch.masks().combine(&inv, &spec).unwrap()).unwrap();
        let run = |model: &TwoBranchModel<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(batch(4, 5));
            let (_, _, l) = model.forward(&mut tape, x).unwrap();
            tape.value(l).data().to_vec()
        };
        assert_eq!(run(&m), run(&rebuilt));
    }

    #[test]
    fn frozen_segments_get_no_update() {
        let arch = TwoBranchArch::new(small_spec()).unwrap();
        let mut m = TwoBranchModel::<f64>::init(arch.clone(), 4);
        let before = m.clone();
        let trainable = Trainable {
            encoder_s: true,
            predictor: true,
            ..Trainable::none()
        };
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, trainable);
        let x = tape.constant(batch(6, 5));
        let (_, _, logits) = bound.forward(&mut tape, x).unwrap();
        let loss = tape.cross_entropy(logits, &[0, 1, 2, 0, 1, 2]).unwrap();
        tape.backward(loss).unwrap();
        let g = bound.gradient(&tape, &arch);
        m.apply_gradient(&g, 0.5, trainable);
        assert_eq!(m.segment(Segment::EncoderC), before.segment(Segment::EncoderC));
        assert_ne!(m.segment(Segment::EncoderS), before.segment(Segment::EncoderS));
        assert_eq!(m.invariant(), before.invariant());
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = TwoBranchArch::new(small_spec()).unwrap();
        let m = TwoBranchModel::<f64>::init(arch, 21);
        let mut buf = Vec::new();
        checkpoint::write_two_branch(&mut buf, &m).unwrap();
        let back: TwoBranchModel<f64> = checkpoint::read_two_branch(&buf[..]).unwrap();
        assert_eq!(back, m);
        // header + raw little-endian tail
        let tail = &buf[buf.len() - 8..];
        assert_eq!(f64::from_le_bytes(tail.try_into().unwrap()), *m.params().last().unwrap());
        assert!(checkpoint::read_single_branch::<_, f64>(&buf[..]).is_err());
    }

    #[test]
    fn single_branch_checkpoint_round_trip() {
        let arch = SingleBranchArch::new(small_spec()).unwrap();
        let m = SingleBranchModel::<f64>::init(arch, 2);
        let mut buf = Vec::new();
        checkpoint::write_single_branch(&mut buf, &m).unwrap();
        let back: SingleBranchModel<f64> = checkpoint::read_single_branch(&buf[..]).unwrap();
        assert_eq!(back, m);
    }
}
