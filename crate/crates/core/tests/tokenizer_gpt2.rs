mod common;

use common::{fixture, mixed_corpus};
use latentscope::tokenizer::BpeVocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    text: String,
    ids: Vec<u32>,
}

fn vocab() -> BpeVocab {
    BpeVocab::load(fixture("gpt2/vocab.json"), fixture("gpt2/merges.txt")).unwrap()
}

#[test]
fn encodings_match_reference_tokenizer() {
    let v = vocab();
    let cases: Vec<Case> =
        serde_json::from_str(&std::fs::read_to_string(fixture("gpt2/oracle_encodings.json")).unwrap()).unwrap();
    assert!(cases.iter().any(|c| c.text == "Hello world" && c.ids == [15496, 995]));
    for c in &cases {
        assert_eq!(v.encode(&c.text), c.ids, "encoding {:?}", c.text);
        assert_eq!(v.decode(&c.ids).unwrap(), c.text);
    }
}

#[test]
fn round_trip_on_a_mebibyte_of_text() {
    let v = vocab();
    let text = mixed_corpus(1, 1 << 20);
    let start = std::time::Instant::now();
    let ids = v.encode(&text);
    assert_eq!(v.decode(&ids).unwrap(), text);
    assert!(ids.len() < text.len(), "BPE should compress");
    assert!(start.elapsed().as_secs_f64() < 5.0, "took {:?}", start.elapsed());
}

#[test]
fn round_trip_on_decoded_random_ids() {
    // random id sequences decode to arbitrary byte strings; valid UTF-8 ones
    // must survive encode/decode unchanged
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    for _ in 0..500 {
        let ids: Vec<u32> = (0..rng.gen_range(1..20)).map(|_| rng.gen_range(0..50257)).collect();
        let Ok(text) = String::from_utf8(v.decode_bytes(&ids).unwrap()) else {
            continue;
        };
        assert_eq!(v.decode(&v.encode(&text)).unwrap(), text);
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn vocabulary_shape() {
    let v = vocab();
    assert_eq!(v.vocab_size(), 50257);
    assert_eq!(v.n_merges(), 50000);
    assert_eq!(v.bos_id(), Some(50256));
}
