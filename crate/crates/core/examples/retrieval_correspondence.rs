//! Nearest-neighbour shape retrieval in the learned embedding, and point
//! correspondences between two shapes through shared max-pooling winners.
//!
//! `cargo run --release --example retrieval_correspondence`

use setnet::analysis::{correspondence, retrieve};
use setnet::harness::{self, ExperimentConfig};

fn main() -> setnet::Result<()> {
    let mut cfg = ExperimentConfig::from_text(include_str!("../../../configs/synth_classify.cfg"))?;
    cfg.apply_all(&[
        ("train.epochs".into(), "3".into()),
        ("data.per_class".into(), "40".into()),
    ])?;
    let (_, test) = harness::load_datasets(&cfg)?;
    let state = harness::train(&cfg, None, &mut |_| {})?.outcome.state;

    let query = &test.clouds[0];
    let gallery = &test.clouds[1..];
    let name = |c: usize| test.class_names[c].as_str();
    println!("query {} ({})", query.id, name(query.class_label.unwrap()));
    for (id, d) in retrieve(&state, query, gallery, 5)? {
        let hit = gallery.iter().find(|c| c.id == id).unwrap();
        println!("  {id:<16} {:<9} distance {d:.4}", name(hit.class_label.unwrap()));
    }

    let other = gallery.iter().find(|c| c.class_label == query.class_label).unwrap();
    let pairs = correspondence(&state, query, other)?;
    println!("{} corresponding pairs between {} and {}, first five:", pairs.len(), query.id, other.id);
    for &(a, b) in pairs.iter().take(5) {
        println!("  {:?} <-> {:?}", query.point(a), other.point(b));
    }
    Ok(())
}
