use uad_core::dataset::{build_manifest, render, Label, SampleDescriptor, SynthConfig};

fn pixels(d: &SampleDescriptor, cfg: &SynthConfig) -> Vec<f64> {
    render(d, cfg).unwrap().as_slice().to_vec()
}

/// Plain full-batch logistic regression on standardised pixels.
struct Probe {
    mean: Vec<f64>,
    std: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl Probe {
    fn fit(xs: &[Vec<f64>], ys: &[f64]) -> Self {
        let dim = xs[0].len();
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..dim)
            .map(|j| (xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-6))
            .collect();
        let mut probe = Probe { mean, std, w: vec![0.0; dim], b: 0.0 };
        let zs: Vec<Vec<f64>> = xs.iter().map(|x| probe.standardise(x)).collect();
        let (lr, l2) = (0.05, 1e-3);
        for _ in 0..300 {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (z, &y) in zs.iter().zip(ys) {
                let err = probe.prob_z(z) - y;
                gb += err;
                for (g, v) in gw.iter_mut().zip(z) {
                    *g += err * v;
                }
            }
            for (w, g) in probe.w.iter_mut().zip(&gw) {
                *w -= lr * (g / n + l2 * *w);
            }
            probe.b -= lr * gb / n;
        }
        probe
    }

    fn standardise(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn prob_z(&self, z: &[f64]) -> f64 {
        let a: f64 = self.b + z.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>();
        1.0 / (1.0 + (-a).exp())
    }

    fn predict(&self, x: &[f64]) -> bool {
        self.prob_z(&self.standardise(x)) >= 0.5
    }
}

#[test]
fn linear_probe_separates_live_from_spoof_on_unseen_identities() {
    let cfg = SynthConfig { num_ids: 40, frames_per_video: 3, seed: 3, ..Default::default() };
    let manifest = build_manifest(&cfg).unwrap();
    // half of each class from the first identities for training, the rest held out
    let pick = |live: bool, ids: std::ops::Range<u32>, take: usize| -> Vec<&SampleDescriptor> {
        manifest
            .records
            .iter()
            .filter(|r| (r.label == Label::Live) == live && ids.contains(&r.identity_id))
            // spoofs: one frame per video, spread over every identity
            .filter(|r| live || r.frame == 0)
            .step_by(if live { 1 } else { 5 })
            .take(take)
            .collect()
    };
    let train: Vec<_> = pick(true, 0..20, 50).into_iter().chain(pick(false, 0..20, 50)).collect();
    let test: Vec<_> = pick(true, 20..40, 50).into_iter().chain(pick(false, 20..40, 50)).collect();
    assert_eq!((train.len(), test.len()), (100, 100));

    let xs: Vec<Vec<f64>> = train.iter().map(|d| pixels(d, &cfg)).collect();
    let ys: Vec<f64> = train.iter().map(|d| f64::from(u8::from(d.label == Label::Live))).collect();
    let probe = Probe::fit(&xs, &ys);
    let correct = test.iter().filter(|d| probe.predict(&pixels(d, &cfg)) == (d.label == Label::Live)).count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "held-out probe accuracy {acc}");
}
