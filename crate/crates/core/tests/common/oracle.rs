//! Straight-from-definition reference implementations and the equivalence
//! checks that compare the library against them.

use falconfuse_core::metrics::{classification_report, confusion_matrix, roc_curve, ConfusionMatrix};
use falconfuse_core::ops::Conv2dParams;
use falconfuse_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Seven nested loops: batch, output channel, output row and column, input
/// channel within the group, kernel row and column.
pub fn reference_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, p: Conv2dParams) -> Vec<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, cg, kh, kw) = w.dims4().unwrap();
    let (s, pad, g) = (p.stride, p.padding, p.groups);
    let (oh, ow) = ((h + 2 * pad - kh) / s + 1, (wd + 2 * pad - kw) / s + 1);
    let og = o / g;
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for ni in 0..n {
        for oc in 0..o {
            let group = oc / og;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for icg in 0..cg {
                        let ic = group * cg + icg;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * s + ky) as isize - pad as isize;
                                let ix = (xx * s + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                acc += x.data()[((ni * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * cg + icg) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Dense, strided, padded, grouped and depthwise layouts against
/// [`reference_conv`] at 1e-5.
pub fn conv_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layouts: [(&[usize], &[usize], usize, usize, usize); 7] = [
        (&[2, 3, 6, 6], &[4, 3, 3, 3], 1, 0, 1),
        (&[2, 3, 6, 6], &[4, 3, 3, 3], 1, 1, 1),
        (&[1, 3, 7, 5], &[2, 3, 3, 3], 2, 1, 1),
        (&[2, 4, 8, 8], &[4, 4, 4, 4], 4, 0, 1),
        (&[2, 4, 5, 5], &[6, 2, 3, 3], 1, 1, 2),
        (&[2, 6, 9, 9], &[6, 1, 7, 7], 1, 3, 6),
        (&[1, 5, 8, 8], &[5, 1, 5, 5], 2, 2, 5),
    ];
    for (xs, ws, stride, padding, groups) in layouts {
        let x = random(xs, &mut rng);
        let w = random(ws, &mut rng);
        let b = random(&[ws[0]], &mut rng);
        let p = Conv2dParams { stride, padding, groups };
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), p).unwrap();
        let want = reference_conv(&x, &w, Some(&b), p);
        let got = tape.value(y).data();
        assert_eq!(got.len(), want.len(), "{xs:?} {ws:?}");
        for (i, (g, r)) in got.iter().zip(&want).enumerate() {
            assert!((g - r).abs() <= 1e-5 * r.abs().max(1.0), "{xs:?} {ws:?} s{stride} p{padding} g{groups} [{i}]: {g} vs {r}");
        }
    }
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// A nonnegative fraction; zero denominators mean "undefined", reported as 0.
#[derive(Clone, Copy)]
struct Ratio(u128, u128);

impl Ratio {
    fn to_f64(self) -> f64 {
        if self.1 == 0 || self.0 == 0 {
            return 0.0;
        }
        let g = gcd(self.0, self.1);
        let (n, d) = (self.0 / g, self.1 / g);
        assert!(n < 1 << 53 && d < 1 << 53, "oracle fraction too large for exact f64");
        n as f64 / d as f64
    }
}

/// Per-class `[accuracy, precision, recall, f1]` computed from the textbook
/// definitions in exact rational arithmetic and rounded once, plus the
/// macro average as the in-order mean of those values.
pub fn reference_report(cm: &[Vec<u64>]) -> (Vec<[f64; 4]>, [f64; 4]) {
    let k = cm.len();
    let mut per_class = Vec::new();
    for c in 0..k {
        let (mut tp, mut fp, mut fn_, mut tn) = (0u128, 0u128, 0u128, 0u128);
        for (i, row) in cm.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let v = v as u128;
                match (i == c, j == c) {
                    (true, true) => tp += v,
                    (false, true) => fp += v,
                    (true, false) => fn_ += v,
                    (false, false) => tn += v,
                }
            }
        }
        let precision = Ratio(tp, tp + fp);
        let recall = Ratio(tp, tp + fn_);
        // 2PR / (P + R) with P = a/b, R = c/d is 2ac / (ad + cb).
        let f1 = if precision.1 == 0 || recall.1 == 0 {
            Ratio(0, 0)
        } else {
            let (a, b, c2, d) = (precision.0, precision.1, recall.0, recall.1);
            Ratio(2 * a * c2, a * d + c2 * b)
        };
        let accuracy = Ratio(tp + tn, tp + fp + fn_ + tn);
        per_class.push([accuracy.to_f64(), precision.to_f64(), recall.to_f64(), f1.to_f64()]);
    }
    let mut macro_avg = [0.0; 4];
    for (m, slot) in macro_avg.iter_mut().enumerate() {
        *slot = per_class.iter().map(|v| v[m]).sum::<f64>() / k as f64;
    }
    (per_class, macro_avg)
}

/// Exact agreement on `n` random confusion matrices of 2 to 5 classes,
/// including empty rows and columns.
pub fn report_equivalence(n: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..n {
        let k = rng.random_range(2..=5);
        let mut cm: Vec<Vec<u64>> = (0..k)
            .map(|_| (0..k).map(|_| if rng.random_bool(0.2) { 0 } else { rng.random_range(0..60) }).collect())
            .collect();
        if trial % 10 == 0 {
            let c = rng.random_range(0..k);
            cm[c].iter_mut().for_each(|v| *v = 0);
        }
        if cm.iter().flatten().all(|&v| v == 0) {
            cm[0][0] = 1;
        }
        let got = classification_report(&ConfusionMatrix(cm.clone())).unwrap();
        let (want, want_macro) = reference_report(&cm);
        for (c, (g, w)) in got.per_class.iter().zip(&want).enumerate() {
            assert_eq!(g.values(), *w, "trial {trial} class {c}: {cm:?}");
        }
        assert_eq!(got.macro_avg.values(), want_macro, "trial {trial} macro: {cm:?}");
    }
}

/// AUC as the fraction of positive/negative pairs ranked correctly, ties
/// counting one half.
pub fn pairwise_auc(scores: &[f64], truths: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &ti) in truths.iter().enumerate() {
        for (j, &tj) in truths.iter().enumerate() {
            if ti && !tj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// `n` random 30-sample sets, half with heavily tied scores, at 1e-9.
pub fn auc_equivalence(n: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..n {
        let truths: Vec<bool> = (0..30).map(|i| if i < 2 { i == 0 } else { rng.random_bool(0.4) }).collect();
        let scores: Vec<f64> = if trial % 2 == 0 {
            (0..30).map(|_| rng.random_range(0..6) as f64 / 5.0).collect()
        } else {
            (0..30).map(|_| rng.random::<f64>()).collect()
        };
        let got = roc_curve(&scores, &truths).unwrap().auc;
        let want = pairwise_auc(&scores, &truths);
        assert!((got - want).abs() <= 1e-9, "trial {trial}: {got} vs {want}");
    }
}

/// Confusion counts against a per-cell count over the label lists.
pub fn confusion_equivalence(n: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for trial in 0..n {
        let k = rng.random_range(2..=6);
        let len = rng.random_range(0..80);
        let truth: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
        let cm = confusion_matrix(&truth, &pred, k).unwrap();
        for i in 0..k {
            for j in 0..k {
                let count = truth.iter().zip(&pred).filter(|&(&t, &p)| t == i && p == j).count() as u64;
                assert_eq!(cm.0[i][j], count, "trial {trial} cell ({i}, {j})");
            }
        }
    }
}
