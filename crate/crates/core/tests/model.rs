mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recipegen::model::{load_checkpoint, save_checkpoint, Batch, Model, ModelConfig, TrainState};

fn small(vocab: usize, layers: usize) -> ModelConfig {
    ModelConfig { vocab_size: vocab, n_positions: 8, n_embd: 8, n_layer: layers, n_head: 2, ..ModelConfig::paper_default() }
        .without_dropout()
}

fn fd_batch() -> Batch {
    let mut b = Batch::from_sequences(&[vec![1u32, 5, 2, 7, 3, 3], vec![4, 0, 6, 2]], 0);
    // a masked key inside the second row as well as the right padding
    b.mask[6 + 1] = 0;
    b
}

#[test]
fn gradients_match_central_differences() {
    let cfg = small(8, 2);
    assert!(cfg.parameter_count() <= 2000);
    let mut m = Model::<f64>::new(cfg, 11).unwrap();
    common::jitter(&mut m, 0.3, 12);
    let (err, at) = common::max_fd_error(&m, &fd_batch(), 1e-5, 1e-6);
    assert!(err < 1e-4, "{err:e} at {at}");
}

#[test]
fn gradients_hold_under_a_fixed_dropout_mask() {
    let cfg = ModelConfig { resid_dropout: 0.2, embd_dropout: 0.2, attn_dropout: 0.2, ..small(8, 1) };
    let mut m = Model::<f64>::new(cfg, 3).unwrap();
    common::jitter(&mut m, 0.3, 4);
    let batch = fd_batch();
    let state = TrainState::train(99);
    let (_, g) = m.backward(&batch, state).unwrap();
    let h = 1e-5;
    let mut probe = m.clone();
    let mut worst = 0.0f64;
    for ti in 0..g.tensors().len() {
        for j in (0..g.tensors()[ti].len()).step_by(7) {
            let orig = probe.params.tensors()[ti].data[j];
            probe.params.tensors_mut()[ti].data[j] = orig + h;
            let up = probe.loss(&batch, state).unwrap();
            probe.params.tensors_mut()[ti].data[j] = orig - h;
            let down = probe.loss(&batch, state).unwrap();
            probe.params.tensors_mut()[ti].data[j] = orig;
            let n = (up - down) / (2.0 * h);
            let a = g.tensors()[ti].data[j];
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
        }
    }
    assert!(worst < 1e-4, "{worst:e}");
}

#[test]
fn one_dimensional_embedding_reduces_to_the_final_bias() {
    // With C = 1 every layer norm outputs its bias, so logits are wte * lnf_b.
    let cfg = ModelConfig { vocab_size: 2, n_positions: 4, n_embd: 1, n_layer: 1, n_head: 1, ..ModelConfig::paper_default() }
        .without_dropout();
    let mut m = Model::<f64>::new(cfg, 0).unwrap();
    m.params.wte.data = vec![1.0, -1.0];
    m.params.lnf_b.data = vec![0.5];
    let batch = Batch::from_sequences(&[vec![0u32, 1, 1]], 0);
    let (loss, g) = m.backward(&batch, TrainState::eval()).unwrap();
    // logits [0.5, -0.5], both labels are 1
    assert!((loss - (1.0f64 + 1.0f64.exp()).ln()).abs() < 1e-12);
    let sigmoid_one = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((g.lnf_b.data[0] - 2.0 * sigmoid_one).abs() < 1e-12, "{}", g.lnf_b.data[0]);
    assert!((g.lnf_b.data[0] - 1.462117157).abs() < 1e-9);
}

#[test]
fn zero_parameters_give_uniform_loss() {
    for v in [2usize, 16, 256] {
        let mut m = Model::<f64>::new(small(v, 1), 1).unwrap();
        for t in m.params.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let batch = Batch::from_sequences(&[vec![0u32, 1, 1, 0]], 0);
        let loss = m.loss(&batch, TrainState::eval()).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn desk_model_probes() {
    let cfg = ModelConfig { vocab_size: 300, ..ModelConfig::desk() };
    let mut m = Model::<f32>::new(cfg, 5).unwrap();
    common::jitter(&mut m, 0.05, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let worst = common::probe_once(&m, &mut rng, 24);
        assert!(worst <= 1e-5, "{worst:e}");
    }
}

#[test]
fn padding_never_reaches_gradients() {
    let mut m = Model::<f64>::new(small(8, 1), 2).unwrap();
    common::jitter(&mut m, 0.2, 3);
    let a = Batch::from_sequences(&[vec![1u32, 2, 3, 4, 5], vec![2, 6]], 0);
    let mut b = a.clone();
    for (id, &mask) in b.ids.iter_mut().zip(&a.mask) {
        if mask == 0 {
            *id = 7;
        }
    }
    let (la, ga) = m.backward(&a, TrainState::eval()).unwrap();
    let (lb, gb) = m.backward(&b, TrainState::eval()).unwrap();
    assert_eq!(la, lb);
    assert_eq!(ga, gb);
}

#[test]
fn batch_rows_are_independent() {
    let m = Model::<f32>::new(small(8, 2), 8).unwrap();
    let row = vec![3u32, 1, 4, 1, 5];
    let alone = m.forward(&Batch::from_sequences(std::slice::from_ref(&row), 0), TrainState::eval()).unwrap();
    let both = m.forward(&Batch::from_sequences(&[row, vec![2, 7, 1, 0, 2]], 0), TrainState::eval()).unwrap();
    for (x, y) in alone.iter().zip(&both[..alone.len()]) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn dropout_is_seeded() {
    let cfg = ModelConfig { resid_dropout: 0.3, embd_dropout: 0.3, attn_dropout: 0.3, ..small(8, 1) };
    let m = Model::<f32>::new(cfg, 1).unwrap();
    let b = Batch::from_sequences(&[vec![1u32, 2, 3, 4]], 0);
    let a1 = m.loss(&b, TrainState::train(5)).unwrap();
    assert_eq!(a1, m.loss(&b, TrainState::train(5)).unwrap());
    assert_ne!(a1, m.loss(&b, TrainState::train(6)).unwrap());
    assert_eq!(m.loss(&b, TrainState::eval()).unwrap(), m.without_dropout_loss(&b));
}

trait EvalLoss {
    fn without_dropout_loss(&self, b: &Batch) -> f64;
}

impl EvalLoss for Model<f32> {
    fn without_dropout_loss(&self, b: &Batch) -> f64 {
        let plain = Model { config: self.config.without_dropout(), params: self.params.clone() };
        plain.loss(b, TrainState::train(123)).unwrap()
    }
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let mut m = Model::<f32>::new(small(8, 2), 9).unwrap();
    common::jitter(&mut m, 0.1, 10);
    let ids = [1u32, 4, 2, 6, 0, 3, 5];
    let full = m.forward(&Batch::from_sequences(&[ids.to_vec()], 0), TrainState::eval()).unwrap();
    let (mut cache, first) = m.prefill(&ids[..2]).unwrap();
    let mut rows = vec![first];
    for &t in &ids[2..] {
        rows.push(m.step(&mut cache, t).unwrap());
    }
    for (k, row) in rows.iter().enumerate() {
        let pos = k + 1;
        for (x, y) in row.iter().zip(&full[pos * 8..(pos + 1) * 8]) {
            assert!((x - y).abs() <= 1e-5, "position {pos}");
        }
    }
    m.step(&mut cache, 1).unwrap();
    assert!(m.step(&mut cache, 1).is_err(), "context is full");
}

#[test]
fn resizing_keeps_existing_rows() {
    let m = Model::<f32>::new(small(10, 1), 4).unwrap();
    let before = m.params.wte.data.clone();
    let grown = m.clone().resize_token_embeddings(12, 1).unwrap();
    assert_eq!(grown.config.vocab_size, 12);
    assert_eq!(grown.params.wte.shape, vec![12, 8]);
    assert_eq!(&grown.params.wte.data[..80], &before[..]);
    assert!(grown.params.wte.data[80..].iter().any(|&x| x != 0.0));
    let shrunk = m.clone().resize_token_embeddings(8, 1).unwrap();
    assert_eq!(shrunk.params.wte.data, before[..64]);
    assert_eq!(shrunk.params.wpe, m.params.wpe);
    assert_eq!(m.clone().resize_token_embeddings(10, 1).unwrap(), m);
    let b = Batch::from_sequences(&[vec![11u32, 3]], 0);
    assert!(grown.loss(&b, TrainState::eval()).is_ok());
    assert!(m.loss(&b, TrainState::eval()).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut m = Model::<f32>::new(small(9, 2), 13).unwrap();
    common::jitter(&mut m, 0.1, 14);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    let first = std::fs::read(&path).unwrap();
    save_checkpoint(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);

    let mut cut = first.clone();
    cut.truncate(first.len() - 3);
    std::fs::write(&path, &cut).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&path).is_err());
    assert!(load_checkpoint(&dir.path().join("absent.bin")).is_err());
}

#[test]
fn bad_inputs_are_rejected() {
    let m = Model::<f32>::new(small(8, 1), 1).unwrap();
    assert!(Batch::new(vec![1, 2, 3], vec![1, 1], 1, 3).is_err());
    let too_long = Batch::from_sequences(&[vec![1u32; 9]], 0);
    assert!(m.forward(&too_long, TrainState::eval()).is_err());
    let no_labels = Batch::from_sequences(&[vec![1u32]], 0);
    assert!(m.loss(&no_labels, TrainState::eval()).is_err());
    let bad = ModelConfig { n_head: 3, ..small(8, 1) };
    assert!(Model::<f32>::new(bad, 1).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dropout: f64 = rng.gen_range(1.0..2.0);
    assert!(Model::<f32>::new(ModelConfig { attn_dropout: dropout, ..small(8, 1) }, 1).is_err());
}

#[test]
fn f32_and_f64_agree() {
    let m = Model::<f64>::new(small(8, 2), 21).unwrap();
    let m32 = Model { config: m.config.clone(), params: m.params.cast::<f32>() };
    let b = fd_batch();
    let l64 = m.loss(&b, TrainState::eval()).unwrap();
    let l32 = m32.loss(&b, TrainState::eval()).unwrap();
    assert!((l64 - l32).abs() < 1e-5);
}
