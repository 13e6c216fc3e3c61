use paraal::embedspace::{train_semantic_space, SemanticSpace, VsConfig, VsPair};
use paraal::numerics::Rng;
use paraal::taskgen::{caption_pairs, generate_dataset, Dataset, TaskConfig};

fn trained(seed: u64, captions: usize) -> (Dataset, SemanticSpace, Vec<f64>) {
    let data = generate_dataset(&TaskConfig::default(), seed).unwrap();
    let mut rng = Rng::new(seed);
    let train_scenes: Vec<usize> = {
        let mut s: Vec<usize> = data.train_indices().iter().map(|&i| data.items[i].scene_id).collect();
        s.dedup();
        s
    };
    let caps = caption_pairs(&data, &train_scenes, &mut rng, captions).unwrap();
    let answers: Vec<_> = data.train_indices()[..captions]
        .iter()
        .map(|&i| data.answer_pair(&data.items[i]))
        .collect();
    let pairs: Vec<VsPair> = caps
        .iter()
        .map(|c| (c.features.as_slice(), c.tokens.as_slice()))
        .collect();
    let apairs: Vec<VsPair> = answers
        .iter()
        .map(|c| (c.features.as_slice(), c.tokens.as_slice()))
        .collect();
    let mut space = SemanticSpace::new(
        data.vocab.len(),
        data.config.feature_dim,
        &VsConfig::default(),
        &mut rng,
    )
    .unwrap();
    let t0 = std::time::Instant::now();
    let trace = train_semantic_space(&mut space, &pairs, &apairs, &mut rng).unwrap();
    eprintln!("vs training took {:?}", t0.elapsed());
    (data, space, trace.losses)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn trained_space_clusters_paraphrases() {
    let (data, space, losses) = trained(11, 400);
    let head: f64 = losses[..50].iter().sum::<f64>() / 50.0;
    let tail: f64 = losses[losses.len() - 50..].iter().sum::<f64>() / 50.0;
    eprintln!("loss {head:.4} -> {tail:.4}");
    assert!(tail < head);

    // embeddings of every form of every paraphrased class
    let mut points: Vec<(usize, Vec<f64>)> = Vec::new();
    for (id, c) in data.table.classes().iter().enumerate() {
        if c.forms.len() > 1 {
            for f in &c.forms {
                points.push((id, space.embed_text(f).unwrap()));
            }
        }
    }
    let mut intra = (0.0, 0);
    let mut inter = (0.0, 0);
    let mut sil = 0.0;
    for (i, (ci, pi)) in points.iter().enumerate() {
        let mut own = (0.0, 0);
        let mut other: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for (j, (cj, pj)) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = dist(pi, pj);
            if ci == cj {
                own.0 += d;
                own.1 += 1;
                intra.0 += d;
                intra.1 += 1;
            } else {
                let e = other.entry(*cj).or_default();
                e.0 += d;
                e.1 += 1;
                inter.0 += d;
                inter.1 += 1;
            }
        }
        let a = own.0 / own.1 as f64;
        let b = other.values().map(|(s, n)| s / *n as f64).fold(f64::INFINITY, f64::min);
        sil += (b - a) / a.max(b);
    }
    sil /= points.len() as f64;
    let intra = intra.0 / intra.1 as f64;
    let inter = inter.0 / inter.1 as f64;

    let mut rng = Rng::new(5);
    let mut wins = 0;
    let trials = 1000;
    for _ in 0..trials {
        let i = rng.below(points.len());
        let same: Vec<usize> = (0..points.len())
            .filter(|&j| j != i && points[j].0 == points[i].0)
            .collect();
        let diff: Vec<usize> = (0..points.len()).filter(|&j| points[j].0 != points[i].0).collect();
        let p = same[rng.below(same.len())];
        let n = diff[rng.below(diff.len())];
        if dist(&points[i].1, &points[p].1) < dist(&points[i].1, &points[n].1) {
            wins += 1;
        }
    }
    eprintln!("intra {intra:.4} inter {inter:.4} silhouette {sil:.4} triples {wins}/{trials}");
    assert!(intra < inter);
    assert!(sil > 0.0);
    assert!(wins as f64 >= 0.8 * trials as f64);
}
