use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scaleformer::metrics::*;
use scaleformer::Tensor;

#[path = "support/oracles.rs"]
mod oracles;
use oracles::*;

// ---- oracle equivalence --------------------------------------------------

#[test]
fn metrics_match_naive_oracles() {
    for seed in 0..3 {
        let x = random(&[4, 16, 16], seed, 0.05, 1.0);
        let r = random(&[4, 16, 16], seed + 100, 0.05, 1.0);
        assert!(close(psnr(&x, &r, 1.0).unwrap(), psnr_oracle(&x, &r), 1e-6));
        assert!(close(ssim(&x, &r, 1.0).unwrap(), ssim_oracle(&x, &r, 1.0), 1e-5));
        assert!(close(sam(&x, &r).unwrap(), sam_oracle(&x, &r), 1e-5));
        assert!(close(ergas(&x, &r, 2.0).unwrap(), ergas_oracle(&x, &r, 2.0), 1e-6));
        assert!(close(scc(&x, &r).unwrap(), scc_oracle(&x, &r), 1e-5));
        assert!(close(q_index(&x, &r).unwrap(), q_oracle(&x, &r), 1e-5));
        let m = random(&[4, 8, 8], seed + 200, 0.05, 1.0);
        let p = random(&[1, 16, 16], seed + 300, 0.05, 1.0);
        let nr = no_reference_indices(&x, &m, &p, 2.0).unwrap();
        let (dl, ds, qnr) = nr_oracle(&x, &m, &p);
        assert!(close(nr.d_lambda, dl, 1e-5), "{} vs {dl}", nr.d_lambda);
        assert!(close(nr.d_s, ds, 1e-5), "{} vs {ds}", nr.d_s);
        assert!(close(nr.qnr, qnr, 1e-5));
    }
}

// ---- perfect scores and invariances -------------------------------------

#[test]
fn identical_inputs_give_perfect_scores() {
    let x = random(&[4, 16, 16], 7, 0.05, 1.0);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    assert_eq!(ssim(&x, &x, 1.0).unwrap(), 1.0);
    assert_eq!(sam(&x, &x).unwrap(), 0.0);
    assert_eq!(ergas(&x, &x, 2.0).unwrap(), 0.0);
    assert_eq!(scc(&x, &x).unwrap(), 1.0);
    assert_eq!(q_index(&x, &x).unwrap(), 1.0);
    // Fused image that reproduces the MS inter-band and PAN relations exactly.
    let lrms = Tensor::full(&[4, 8, 8], 0.5);
    let fused = Tensor::full(&[4, 16, 16], 0.5);
    let pan = Tensor::full(&[1, 16, 16], 0.5);
    let nr = no_reference_indices(&fused, &lrms, &pan, 2.0).unwrap();
    assert_eq!((nr.d_lambda, nr.d_s, nr.qnr), (0.0, 0.0, 1.0));
}

#[test]
fn sam_is_scale_invariant() {
    let x = random(&[4, 16, 16], 1, 0.05, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let plane: Vec<f32> = (0..256).map(|_| rng.random_range(0.5f32..3.0)).collect();
    let scaled = Tensor::new(x.shape().to_vec(), x.data().iter().enumerate().map(|(i, v)| v * plane[i % 256]).collect()).unwrap();
    assert!(sam(&x, &scaled).unwrap() < 1e-6);
    assert!(sam(&scaled, &x).unwrap() < 1e-6);
    assert!(sam(&x, &x.map(|v| v * 2.7)).unwrap() < 1e-6);
    let r = random(&[4, 16, 16], 2, 0.05, 1.0);
    let base = sam(&x, &r).unwrap();
    assert!(close(sam(&x.map(|v| v * 2.7), &r).unwrap(), base, 1e-6));
}

#[test]
fn scc_ignores_additive_constants() {
    // Values on a 1/1024 grid make the power-of-two offsets exact in f32.
    let q = |t: Tensor| t.map(|v| (v * 1024.0).round() / 1024.0);
    let x = q(random(&[4, 16, 16], 3, 0.05, 1.0));
    let r = q(random(&[4, 16, 16], 4, 0.05, 1.0));
    let base = scc(&x, &r).unwrap();
    assert_eq!(scc(&x, &r.map(|v| v + 2.0)).unwrap(), base);
    assert_eq!(scc(&x.map(|v| v + 4.0), &r).unwrap(), base);
    assert!(close(scc(&x, &r.map(|v| v + 0.3)).unwrap(), base, 1e-6));
    assert_eq!(scc(&r, &r.map(|v| v + 2.0)).unwrap(), 1.0);
}

// ---- spec examples --------------------------------------------------------

#[test]
fn psnr_examples() {
    let r = Tensor::full(&[2, 8, 8], 0.5);
    let x = Tensor::full(&[2, 8, 8], 0.6);
    assert!(close(psnr(&x, &r, 1.0).unwrap(), 20.0, 1e-4));
    assert!(psnr(&x, &Tensor::full(&[2, 8, 9], 0.5), 1.0).is_err());
    assert!(psnr(&x, &r, 0.0).is_err());
    let r = random(&[4, 16, 16], 5, 0.2, 0.8);
    let mut last = f64::INFINITY;
    for amp in [0.005f32, 0.01, 0.02, 0.05, 0.1] {
        let noise = random(&[4, 16, 16], 6, -1.0, 1.0);
        let x = Tensor::new(r.shape().to_vec(), r.data().iter().zip(noise.data()).map(|(a, n)| a + amp * n).collect()).unwrap();
        let v = psnr(&x, &r, 1.0).unwrap();
        assert!(v < last, "PSNR not decreasing at amplitude {amp}");
        last = v;
    }
}

#[test]
fn ssim_examples() {
    // Zero-mean high-frequency data: local means vanish, so only the inverted
    // structure term remains. (For white noise the luminance term is also
    // inverted and the product turns positive.)
    let x = Tensor::from_fn(vec![2, 16, 16], |i| {
        let sign = if (i[1] + i[2]) % 2 == 0 { 1.0 } else { -1.0 };
        sign * [0.8, 0.5][i[0]]
    });
    let v = ssim(&x, &x.map(|v| -v), 2.0).unwrap();
    assert!(v < 0.1, "{v}");
    assert!(ssim(&Tensor::zeros(&[1, 10, 16]), &Tensor::zeros(&[1, 10, 16]), 1.0).is_err());
}

#[test]
fn sam_examples() {
    let mut a = vec![0f32; 2 * 16];
    let mut b = vec![0f32; 2 * 16];
    a[..16].iter_mut().for_each(|v| *v = 1.0);
    b[16..].iter_mut().for_each(|v| *v = 1.0);
    let x = Tensor::new(vec![2, 4, 4], a).unwrap();
    let r = Tensor::new(vec![2, 4, 4], b).unwrap();
    assert!(close(sam(&x, &r).unwrap(), FRAC_PI_2, 1e-12));
    assert_eq!(sam(&Tensor::zeros(&[2, 4, 4]), &r).unwrap(), 0.0);
    assert!(sam(&Tensor::zeros(&[1, 4, 4]), &Tensor::zeros(&[1, 4, 4])).is_err());
}

#[test]
fn ergas_examples() {
    let r = Tensor::full(&[1, 4, 4], 10.0);
    let x = Tensor::new(vec![1, 4, 4], (0..16).map(|i| if i % 2 == 0 { 11.0 } else { 9.0 }).collect()).unwrap();
    assert!(close(ergas(&x, &r, 2.0).unwrap(), 5.0, 1e-12));
    assert!(ergas(&x, &Tensor::zeros(&[1, 4, 4]), 2.0).is_err());
    assert!(ergas(&x, &r, 1.0).is_err());
}

#[test]
fn scc_examples() {
    let r = random(&[3, 12, 12], 10, -1.0, 1.0);
    assert!(close(scc(&r.map(|v| -v), &r).unwrap(), -1.0, 1e-12));
    assert!(scc(&Tensor::full(&[1, 5, 5], 1.0), &r.map(|v| v).reshape(&[3, 12, 12]).unwrap()).is_err());
    assert!(scc(&Tensor::full(&[1, 5, 5], 1.0), &Tensor::full(&[1, 5, 5], 2.0)).is_err());
}

#[test]
fn q_examples() {
    let r = random(&[2, 12, 12], 11, 0.1, 1.0);
    let q = q_index(&r.map(|v| 2.0 * v), &r).unwrap();
    assert!(q > 0.0 && q < 1.0, "{q}");
    assert!(q_index(&Tensor::zeros(&[1, 7, 9]), &Tensor::zeros(&[1, 7, 9])).is_err());
}

#[test]
fn no_reference_examples() {
    // All fused bands identical and all MS bands identical.
    let fplane = random(&[1, 16, 16], 12, 0.1, 1.0);
    let mplane = random(&[1, 8, 8], 13, 0.1, 1.0);
    let stack = |p: &Tensor, c: usize| {
        let d: Vec<f32> = (0..c).flat_map(|_| p.data().iter().copied()).collect();
        Tensor::new(vec![c, p.shape()[1], p.shape()[2]], d).unwrap()
    };
    let pan = random(&[1, 16, 16], 14, 0.1, 1.0);
    let nr = no_reference_indices(&stack(&fplane, 3), &stack(&mplane, 3), &pan, 2.0).unwrap();
    assert_eq!(nr.d_lambda, 0.0);
    assert!(close(nr.qnr, 1.0 - nr.d_s, 1e-15));
    assert!(no_reference_indices(&fplane, &mplane, &pan, 2.0).is_err());
    assert!(no_reference_indices(&stack(&fplane, 3), &stack(&mplane, 2), &pan, 2.0).is_err());
}

#[test]
fn metric_ranges_on_nonnegative_imagery() {
    let x = random(&[4, 32, 32], 20, 0.0, 1.0);
    let r = random(&[4, 32, 32], 21, 0.0, 1.0);
    let m = evaluate_image("a", &x, &random(&[4, 16, 16], 22, 0.0, 1.0), &random(&[1, 32, 32], 23, 0.0, 1.0), Some(&r), 2.0, 1.0).unwrap();
    let v = |k: Metric| m.values[&k];
    assert!(v(Metric::Psnr) >= 0.0 && v(Metric::Ergas) >= 0.0);
    assert!((0.0..=1.0).contains(&v(Metric::Ssim)) || v(Metric::Ssim).abs() < 0.05);
    assert!((0.0..=std::f64::consts::PI).contains(&v(Metric::Sam)));
    for k in [Metric::Scc, Metric::Q] {
        assert!((-1.0..=1.0).contains(&v(k)));
    }
    for k in [Metric::DLambda, Metric::DS, Metric::Qnr] {
        assert!((0.0..=1.0).contains(&v(k)), "{k} = {}", v(k));
    }
    assert_eq!(m.values.len(), 9);
}

// ---- aggregation and rendering -------------------------------------------

fn img(id: &str, pairs: &[(Metric, f64)]) -> ImageMetrics {
    ImageMetrics {
        id: id.into(),
        values: pairs.iter().copied().collect::<BTreeMap<_, _>>(),
    }
}

#[test]
fn aggregate_examples() {
    let a = MetricReport::from_images(vec![img("a", &[(Metric::Psnr, 30.0)])]).unwrap();
    let b = MetricReport::from_images(vec![img("b", &[(Metric::Psnr, 40.0)])]).unwrap();
    assert_eq!(aggregate(std::slice::from_ref(&a)).unwrap(), a);
    let ab = aggregate(&[a.clone(), b]).unwrap();
    assert_eq!(ab.means[&Metric::Psnr], 35.0);
    assert_eq!(ab.images.len(), 2);

    let inf = MetricReport::from_images(vec![img("c", &[(Metric::Psnr, f64::INFINITY)])]).unwrap();
    let agg = aggregate(&[a.clone(), inf]).unwrap();
    assert_eq!(agg.means[&Metric::Psnr], 30.0);
    assert_eq!(agg.excluded_infinite[&Metric::Psnr], 1);
    assert!(agg.to_table().contains("1 infinite PSNR"));

    let other = MetricReport::from_images(vec![img("d", &[(Metric::Ssim, 0.9)])]).unwrap();
    assert!(aggregate(&[a, other]).is_err());
    assert!(aggregate(&[]).is_err());
    assert!(MetricReport::from_images(vec![img("a", &[(Metric::Psnr, 1.0)]), img("b", &[(Metric::Sam, 1.0)])]).is_err());
}

#[test]
fn report_renders_paper_layout() {
    let r = MetricReport::from_images(vec![img("jilin", &[(Metric::Psnr, 39.29321), (Metric::Sam, 0.0213)])]).unwrap();
    let table = r.to_table();
    assert!(table.contains("39.2932"));
    let header = table.lines().next().unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(cols, ["image_id", "PSNR", "SSIM", "SAM", "ERGAS", "SCC", "Q", "D_lambda", "D_S", "QNR"]);
    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER);
    assert_eq!(lines.next().unwrap(), "jilin,39.2932,,0.0213,,,,,,");
    assert_eq!(lines.next().unwrap(), "mean,39.2932,,0.0213,,,,,,");
    assert!(Metric::Psnr.higher_is_better() && !Metric::Sam.higher_is_better());
}
