//! Exported stores against the model that produced them.

use arith_probe::data::{gen_logitlens_dataset, TaskKind};
use arith_probe::lens::{earliest_top1, lens_logits, LensNorm};
use arith_probe::store::{read_store, write_store};
use arith_probe::toylm::{export_activations, AnswerOrder, ToyLm, ToyLmConfig};

fn tiny(order: AnswerOrder) -> ToyLm<f32> {
    let cfg = ToyLmConfig { n_layers: 2, d_model: 16, n_heads: 2, answer_order: order, ..Default::default() };
    ToyLm::init(&cfg).unwrap()
}

#[test]
fn final_state_through_unembedding_reproduces_logits() {
    let model = tiny(AnswerOrder::Lsb);
    let ds = gen_logitlens_dataset(200, 3).unwrap();
    let store = export_activations(&model, &ds).unwrap();
    let u = store.unembedding.as_ref().unwrap();
    let (d, last) = (store.header.d_model, store.header.n_layer_states - 1);
    let mut worst = 0.0f32;
    for (item, s) in ds.items.iter().zip(&store.samples) {
        let tokens = model.vocab.tokenize(&item.problem.prompt).unwrap();
        let (logits, states) = model.forward_with_states(&tokens).unwrap();
        assert_eq!(s.states, states.states, "stored states must be the forward states");
        let lens = lens_logits(s.layer(last, d), &u.weights).unwrap();
        for (a, b) in lens.iter().zip(&logits) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    assert!(worst <= 1e-5, "worst relative logit error {worst:e}");
}

#[test]
fn header_and_gold_tokens_follow_the_model() {
    for (order, gold_digit) in [(AnswerOrder::Lsb, 0usize), (AnswerOrder::Msb, 2)] {
        let model = tiny(order);
        let ds = gen_logitlens_dataset(100, 4).unwrap();
        let store = export_activations(&model, &ds).unwrap();
        assert_eq!(store.header.spec.task_kind, TaskKind::Logitlens);
        assert_eq!(store.header.n_layer_states, 3);
        assert_eq!(store.header.tokenizer_fingerprint, model.vocab.fingerprint());
        assert_eq!(store.header.model_name, model.model_name());
        for (item, s) in ds.items.iter().zip(&store.samples) {
            let digit = item.problem.answer_digit(gold_digit);
            let expect = model.vocab.id_of(char::from(b'0' + digit)).unwrap();
            assert_eq!(s.gold_token, Some(expect));
            assert_eq!(s.label, item.label);
        }
    }
}

#[test]
fn exported_store_survives_the_file_round_trip() {
    let model = tiny(AnswerOrder::Lsb);
    let store = export_activations(&model, &gen_logitlens_dataset(120, 5).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lens.store");
    write_store(&store, &path).unwrap();
    let back = read_store(&path).unwrap();
    assert_eq!(back, store);
    let (hist, results) = earliest_top1(&back, LensNorm::Raw).unwrap();
    assert_eq!(hist.counts.iter().sum::<usize>() + hist.never, results.len());
    assert!(earliest_top1(&back, LensNorm::FinalNorm).is_err());
}
