use bharnet::data::{select_active_hands, synth_generate, ClassProfile, Dataset, SkeletonSample, SynthSpec};
use bharnet::Tensor;

fn centered(t: &Tensor, root: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len());
    for f in 0..t.dim(0) {
        for v in 0..t.dim(1) {
            for c in 0..3 {
                out.push(t.at(&[f, v, c]) - t.at(&[f, root, c]));
            }
        }
    }
    out
}

// (body, hands) of the acting person, each root-centered and laid out [frame][joint][xyz].
fn actor_tracks(s: &SkeletonSample) -> (Vec<f64>, Vec<f64>) {
    let p = &s.persons[select_active_hands(s).unwrap().person];
    let (l, r) = (centered(&p.left_hand, 0), centered(&p.right_hand, 0));
    let frames = p.body.dim(0);
    let per = l.len() / frames;
    let hands = (0..frames).flat_map(|f| l[f * per..(f + 1) * per].iter().chain(&r[f * per..(f + 1) * per]).copied()).collect();
    (centered(&p.body, 0), hands)
}

fn class_means(d: &Dataset, hands: bool) -> Vec<Vec<f64>> {
    let mut sums: Vec<Vec<f64>> = vec![Vec::new(); d.num_classes];
    let mut counts = vec![0.0; d.num_classes];
    for s in &d.samples {
        let (b, h) = actor_tracks(s);
        let x = if hands { h } else { b };
        let acc = &mut sums[s.label];
        if acc.is_empty() {
            acc.resize(x.len(), 0.0);
        }
        acc.iter_mut().zip(x).for_each(|(a, v)| *a += v);
        counts[s.label] += 1.0;
    }
    sums.into_iter().zip(counts).map(|(v, n)| v.into_iter().map(|x| x / n).collect()).collect()
}

/// Mean over frames of the largest joint displacement between two trajectories.
fn displacement(a: &[f64], b: &[f64], frames: usize) -> f64 {
    let joints = a.len() / frames / 3;
    let mut total = 0.0;
    for f in 0..frames {
        let worst = (0..joints)
            .map(|j| {
                let i = 3 * (f * joints + j);
                (0..3).map(|c| (a[i + c] - b[i + c]).powi(2)).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max);
        total += worst;
    }
    total / frames as f64
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn body_dominant(spec: &SynthSpec) -> Vec<usize> {
    let profiles = spec.profiles();
    (0..spec.num_classes).filter(|&k| profiles[k] == ClassProfile::BodyDominant).collect()
}

#[test]
fn body_dominant_pairs_move_body_not_hands() {
    let spec = SynthSpec::default();
    let train = synth_generate(&spec, 7).unwrap().train;
    let hand = class_means(&train, true);
    let body = class_means(&train, false);
    let ids = body_dominant(&spec);
    assert!(ids.len() >= 2);
    let sigma = spec.noise_sigma;
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            let dh = displacement(&hand[a], &hand[b], spec.frames);
            let db = displacement(&body[a], &body[b], spec.frames);
            assert!(dh < 3.0 * sigma, "classes {a},{b}: hand displacement {dh}");
            assert!(db > 10.0 * sigma, "classes {a},{b}: body displacement {db}");
        }
    }
}

#[test]
fn body_dominant_classes_separate_on_body_trajectories() {
    let spec = SynthSpec::default();
    let train = synth_generate(&spec, 7).unwrap().train;
    let ids = body_dominant(&spec);
    let tracks: Vec<(usize, Vec<f64>)> = train
        .samples
        .iter()
        .filter(|s| ids.contains(&s.label))
        .map(|s| (s.label, actor_tracks(s).0))
        .collect();
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (i, (la, a)) in tracks.iter().enumerate() {
        for (lb, b) in &tracks[i + 1..] {
            let d = euclid(a, b);
            if la == lb {
                within += d;
                nw += 1;
            } else {
                between += d;
                nb += 1;
            }
        }
    }
    let (within, between) = (within / nw as f64, between / nb as f64);
    assert!(between > within, "between {between} within {within}");
}
