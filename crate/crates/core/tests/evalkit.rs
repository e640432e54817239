mod common;

use common::{random_model, small_task};
use rematch::embedder::Side;
use rematch::evalkit::{embeddings_csv, evaluate, Encoder};
use rematch::synth::World;

#[test]
fn hit_at_1_agrees_with_an_exhaustive_scan() {
    let model = random_model(8, 2);
    let set = World::new(&small_task(8)).unwrap().eval_set(20, 6, 0.5).unwrap();
    let report = evaluate(&model, &set).unwrap();

    let mut hits = 0;
    for (i, pool) in set.pools.iter().enumerate() {
        let q = model.encode(&set.queries[i], Side::Query).unwrap();
        let q = rematch::embedder::fuse(&q).vector;
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (slot, &j) in pool.iter().enumerate() {
            let d = rematch::embedder::fuse(&model.encode(&set.corpus[j as usize], Side::Document).unwrap()).vector;
            let dot: f64 = q.iter().zip(&d).map(|(&a, &b)| a as f64 * b as f64).sum();
            let n = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let c = dot / (n(&q) * n(&d));
            if c > best.0 {
                best = (c, slot);
            }
        }
        hits += (best.1 == set.targets[i]) as usize;
    }
    assert_eq!(report.hit_at_1, hits as f64 / 20.0);
    assert_eq!(report.n_queries, 20);
    assert_eq!(report.pool_size, 6);
    assert!(report.recall_at_k[&1] <= report.recall_at_k[&5]);
    assert_eq!(report.recall_at_k[&10], 1.0);
}

#[test]
fn worker_count_does_not_change_embeddings() {
    let model = random_model(3, 1);
    let set = World::new(&small_task(3)).unwrap().eval_set(150, 4, 0.0).unwrap();
    let seqs: Vec<_> = set.corpus.iter().collect();
    let one = model.embed(&seqs, Side::Document).unwrap();
    std::env::set_var("REMATCH_THREADS", "3");
    let three = model.embed(&seqs, Side::Document).unwrap();
    std::env::remove_var("REMATCH_THREADS");
    assert_eq!(one, three);
}

#[test]
fn embedding_export_lists_queries_then_corpus() {
    let model = random_model(5, 2);
    let set = World::new(&small_task(5)).unwrap().eval_set(4, 3, 0.0).unwrap();
    let csv = embeddings_csv(&model, &set).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 4 + set.corpus.len());
    assert!(lines[0].starts_with("id,side,v0,"));
    assert_eq!(lines[0].split(',').count(), 2 + 16);
    assert!(lines[1].starts_with("q0,query,"));
    assert!(lines[5].starts_with("d0,document,"));
    let q0: Vec<f32> = lines[1].split(',').skip(2).map(|x| x.parse().unwrap()).collect();
    let want = rematch::embedder::fuse(&model.encode(&set.queries[0], Side::Query).unwrap()).vector;
    for (a, b) in q0.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-7 * b.abs().max(1e-3));
    }
}
