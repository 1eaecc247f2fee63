#![allow(dead_code)]

use ids_core::flow::ClassLabel;
use ids_core::library::NewEntry;
use ids_core::{FlowEmbedding, RuleText};
use rand::Rng;

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> FlowEmbedding {
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = FlowEmbedding::from_raw(&raw);
        if !e.is_zero_sentinel() {
            return e;
        }
    }
}

pub fn entry(key: FlowEmbedding, seq: u64, class: &str) -> NewEntry {
    NewEntry {
        key,
        rule: RuleText {
            text: format!("IF in_pkts > {seq} THEN class={class}; previously misclassified as Benign; key features: in_pkts"),
            target_class: ClassLabel::Known(class.into()),
            confused_with: ClassLabel::Known("Benign".into()),
        },
        predicted: ClassLabel::Known("Benign".into()),
        actual: ClassLabel::Known(class.into()),
        source_flow_id: seq,
        created_seq: seq,
    }
}

/// Brute-force top-1: widest accumulation, first index wins ties.
pub fn brute_force(keys: &[FlowEmbedding], q: &FlowEmbedding) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, k) in keys.iter().enumerate() {
        if k.is_zero_sentinel() {
            continue;
        }
        let mut s = 0.0f64;
        for j in 0..k.dim() {
            s += k.values()[j] as f64 * q.values()[j] as f64;
        }
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best
}
