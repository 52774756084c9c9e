// temporary diagnostic, deleted before finalizing
use grm::graph::*;
use grm::trainer::*;
use grm::losses::predict;
use grm::synth::*;

fn main() {
    let mut args = std::env::args().skip(1);
    let ratio: f64 = args.next().unwrap().parse().unwrap();
    let ckpt = args.next().unwrap();
    let samples: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(16);
    let ds = generate_mix_shift(&MixShiftConfig {
        num_domains: 10, nodes_per_domain: 200, num_classes: 5,
        feature_dim: 16, bias_ratio: ratio, edge_prob: 0.025, seed: 0,
    }).unwrap();
    let (trained, cfg) = load_trained(&ckpt).unwrap();
    let model = match &trained.kind { ModelKind::Grm(m) => m, _ => unreachable!() };
    let mut per_domain = Vec::new();
    for dom in 2..10i64 {
        let (mut hits, mut total) = (0usize, 0usize);
        for (_, ex) in ds.examples_in(&[dom]) {
            let (ego, _) = ego_network(&ex.graph, ex.center_node.unwrap(), cfg.hops);
            let mut acc = vec![0.0; ds.num_classes];
            for s in 0..samples {
                let probs = predict(&trained.store, model, &ego, Some(0), None, true, 1000 + s as u64).unwrap();
                for (a, p) in acc.iter_mut().zip(&probs) { *a += p; }
            }
            let pred = acc.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            hits += usize::from(pred == ex.label);
            total += 1;
        }
        per_domain.push(hits as f64 / total as f64);
    }
    let avg = per_domain.iter().sum::<f64>() / per_domain.len() as f64;
    let min = per_domain.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("{ckpt} @ r={ratio} sampled({samples}): min {min:.4} avg {avg:.4}");
}
