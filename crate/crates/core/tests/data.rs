use localbins::data::{generate_corpus, read_corpus_file, write_corpus_file, SceneSample};
use localbins::model::DepthRange;
use localbins::par;

const BINS: usize = 16;
// 0.999 quantile of chi-square with 15 degrees of freedom; fewer occupied
// bins only lower the true critical value, so this is conservative.
const CHI2_CRIT: f64 = 37.70;

fn histogram(s: &SceneSample, range: DepthRange) -> [f64; BINS] {
    let mut h = [0.0; BINS];
    for (d, m) in s.depth.data().iter().zip(&s.mask) {
        if *m {
            let t = ((*d as f64 - range.d_min) / range.span() * BINS as f64) as usize;
            h[t.min(BINS - 1)] += 1.0;
        }
    }
    h
}

fn two_sample_chi2(a: &[f64; BINS], b: &[f64; BINS]) -> f64 {
    let (na, nb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let (ka, kb) = ((nb / na).sqrt(), (na / nb).sqrt());
    a.iter()
        .zip(b)
        .filter(|(x, y)| **x + **y > 0.0)
        .map(|(x, y)| (ka * x - kb * y).powi(2) / (x + y))
        .sum()
}

#[test]
fn scene_depth_distributions_are_diverse() {
    let range = DepthRange::default();
    let corpus = generate_corpus(200, 64, 64, range, 0);
    let hists: Vec<[f64; BINS]> = corpus.iter().map(|s| histogram(s, range)).collect();

    for h in &hists {
        let n: f64 = h.iter().sum();
        let uniform = [n / BINS as f64; BINS];
        let stat: f64 = h.iter().zip(&uniform).map(|(o, e)| (o - e).powi(2) / e).sum();
        assert!(stat > CHI2_CRIT, "scene histogram indistinguishable from uniform");
    }

    let mut pairs = 0usize;
    let mut distinct = 0usize;
    for i in 0..hists.len() {
        for j in i + 1..hists.len() {
            pairs += 1;
            if two_sample_chi2(&hists[i], &hists[j]) > CHI2_CRIT {
                distinct += 1;
            }
        }
    }
    let frac = distinct as f64 / pairs as f64;
    assert!(frac >= 0.9, "only {frac} of scene pairs are distinguishable");
}

#[test]
fn corpus_file_round_trip_and_schedule_independence() {
    let range = DepthRange::default();
    let corpus = generate_corpus(5, 24, 40, range, 11);
    par::set_parallel(false);
    let sequential = generate_corpus(5, 24, 40, range, 11);
    par::set_parallel(true);
    assert_eq!(corpus, sequential);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenes.lbds");
    write_corpus_file(&path, &corpus).unwrap();
    let back = read_corpus_file(&path).unwrap();
    assert_eq!(back, corpus);
    for s in &back {
        s.validate(range).unwrap();
        assert_eq!(s.extent(), (24, 40));
    }
}
