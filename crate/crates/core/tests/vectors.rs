//! Fixed vectors produced by `tests/data/gen_vectors.py`, an independent
//! implementation of the documented random stream and dtype rounding.

use serde_json::Value;
use tree_attn::numerics::{round_to_dtype, seeded_random_tensor};
use tree_attn::DType;

fn vectors() -> Value {
    serde_json::from_str(include_str!("data/random_vectors.json")).unwrap()
}

fn number(v: &Value) -> f64 {
    match v {
        Value::String(s) if s == "inf" => f64::INFINITY,
        Value::String(s) if s == "-inf" => f64::NEG_INFINITY,
        other => other.as_f64().unwrap(),
    }
}

#[test]
fn seeded_tensors_match_reference_stream() {
    let v = vectors();
    for case in v["random_tensors"].as_array().unwrap() {
        let seed: u64 = case["seed"].as_str().unwrap().parse().unwrap();
        let shape: Vec<usize> = case["shape"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect();
        let scale = case["scale"].as_f64().unwrap();
        let want: Vec<f64> = case["values"].as_array().unwrap().iter().map(number).collect();
        let t = seeded_random_tensor(&shape, seed, scale).unwrap();
        assert_eq!(t.shape(), shape.as_slice());
        assert_eq!(t.data(), want.as_slice(), "seed {seed}");
    }
}

#[test]
fn rounding_matches_reference() {
    let v = vectors();
    for case in v["rounding"].as_array().unwrap() {
        let x = case["x"].as_f64().unwrap();
        for (key, dt) in [("bf16", DType::Bf16), ("f32", DType::F32)] {
            let want = number(&case[key]);
            let got = round_to_dtype(x, dt);
            assert!(got == want && got.is_sign_negative() == want.is_sign_negative(), "{dt} {x}: {got} vs {want}");
        }
    }
}
