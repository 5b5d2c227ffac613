//! Library results checked against independent brute-force computations.

use daedl::data::{load_idx, parse_idx, split, two_moons};
use daedl::linalg::Matrix;
use daedl::network::{train, Architecture, EvidentialNetwork, TrainConfig};
use daedl::{GdaModel, Parameterization};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Inverse and log-determinant by Gauss-Jordan elimination with partial pivoting.
fn inverse_and_log_det(a: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    let mut log_det = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        log_det += p.abs().ln();
        m[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                let pivot_row = m[col].clone();
                m[r].iter_mut()
                    .zip(&pivot_row)
                    .for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    (m.into_iter().map(|r| r[n..].to_vec()).collect(), log_det)
}

/// `ln Σ_c ω_c N(z | μ_c, Σ_c + ε·tr(Σ_c)/H·I)` evaluated naively.
fn brute_log_density(x: &[Vec<f64>], y: &[usize], classes: usize, jitter: f64, z: &[f64]) -> f64 {
    let h = z.len();
    let mut density = 0.0;
    for c in 0..classes {
        let rows: Vec<&Vec<f64>> = x
            .iter()
            .zip(y)
            .filter(|(_, &l)| l == c)
            .map(|(r, _)| r)
            .collect();
        let k = rows.len() as f64;
        let mean: Vec<f64> = (0..h)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / k)
            .collect();
        let mut cov = vec![vec![0.0; h]; h];
        for r in &rows {
            for i in 0..h {
                for j in 0..h {
                    cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (k - 1.0);
                }
            }
        }
        let tr: f64 = (0..h).map(|i| cov[i][i]).sum();
        for (i, row) in cov.iter_mut().enumerate() {
            row[i] += jitter * tr / h as f64;
        }
        let (inv, log_det) = inverse_and_log_det(&cov);
        let d: Vec<f64> = z.iter().zip(&mean).map(|(a, b)| a - b).collect();
        let maha: f64 = (0..h)
            .map(|i| (0..h).map(|j| d[i] * inv[i][j] * d[j]).sum::<f64>())
            .sum();
        let weight = k / x.len() as f64;
        let norm = (2.0 * std::f64::consts::PI).powi(h as i32).sqrt() * (0.5 * log_det).exp();
        density += weight * (-0.5 * maha).exp() / norm;
    }
    density.ln()
}

#[test]
fn gda_log_density_matches_direct_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let h = rng.gen_range(1..=6);
        let classes = rng.gen_range(1..=4);
        let n = classes * rng.gen_range(h + 2..30);
        let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let x: Vec<Vec<f64>> = y
            .iter()
            .map(|&c| {
                (0..h)
                    .map(|j| c as f64 * 2.0 + (j as f64) * 0.3 + rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let model = GdaModel::fit(&Matrix::from_rows(&x).unwrap(), &y, classes).unwrap();
        for _ in 0..20 {
            let z: Vec<f64> = (0..h).map(|_| rng.gen_range(-2.0..6.0)).collect();
            let got = model.log_density(&z).unwrap();
            let want = brute_log_density(&x, &y, classes, 1e-6, &z);
            assert!(
                (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                "trial {trial}: {got} vs {want}"
            );
        }
    }
}

fn idx_bytes(images: &[[u8; 6]], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&2u32.to_be_bytes());
    img.extend_from_slice(&3u32.to_be_bytes());
    images.iter().for_each(|im| img.extend_from_slice(im));
    let mut lab = Vec::new();
    lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[test]
fn idx_fixture_round_trip() {
    let images = [
        [0, 255, 51, 102, 153, 204],
        [255, 255, 0, 0, 1, 254],
        [7, 8, 9, 10, 11, 12],
    ];
    let (img, lab) = idx_bytes(&images, &[3, 0, 7]);
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("images-idx3-ubyte"), &img).unwrap();
    std::fs::write(dir.path().join("labels-idx1-ubyte"), &lab).unwrap();
    let ds = load_idx(
        dir.path().join("images-idx3-ubyte"),
        dir.path().join("labels-idx1-ubyte"),
    )
    .unwrap();
    assert_eq!((ds.len(), ds.dim(), ds.num_classes()), (3, 6, 8));
    assert_eq!(ds.labels(), &[3, 0, 7]);
    assert_eq!(ds.sample(0).0, &[0.0, 1.0, 0.2, 0.4, 0.6, 0.8]);
    for (row, im) in ds.features().iter_rows().zip(&images) {
        for (v, &b) in row.iter().zip(im) {
            assert_eq!(*v, f64::from(b) / 255.0);
        }
    }
    assert_eq!(
        parse_idx(&img, &lab, "x").unwrap().features(),
        ds.features()
    );
}

#[test]
fn idx_rejects_bad_magic_and_truncation() {
    let (mut img, lab) = idx_bytes(&[[1; 6]], &[0]);
    assert!(parse_idx(&img[..img.len() - 1], &lab, "x").is_err());
    assert!(parse_idx(&img, &lab[..lab.len() - 1], "x").is_err());
    img[3] = 0x01;
    let err = parse_idx(&img, &lab, "x").unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");
    let (img, _) = idx_bytes(&[[1; 6], [2; 6]], &[0, 1]);
    let (_, lab) = idx_bytes(&[[1; 6]], &[0]);
    assert!(parse_idx(&img, &lab, "x").is_err());
}

#[test]
fn two_moons_reaches_high_train_accuracy_with_defaults() {
    let ds = two_moons(1000, 0.1, 0).unwrap();
    let (tr, va) = split(&ds, 0.8, 1).unwrap();
    let arch = Architecture {
        input_dim: 2,
        hidden: vec![128, 128],
        num_classes: 2,
    };
    let net = EvidentialNetwork::new(&arch, Parameterization::Exp, false, 0).unwrap();
    let (net, history) = train(net, &tr, &va, &TrainConfig::default()).unwrap();
    let acc = net.accuracy(&tr).unwrap();
    assert!(
        acc >= 0.97,
        "train accuracy {acc} after {} epochs",
        history.epochs.len()
    );
}

#[test]
fn training_is_deterministic_in_the_seed() {
    let ds = two_moons(200, 0.1, 3).unwrap();
    let (tr, va) = split(&ds, 0.8, 4).unwrap();
    let arch = Architecture {
        input_dim: 2,
        hidden: vec![8, 8],
        num_classes: 2,
    };
    let cfg = TrainConfig {
        max_epochs: 5,
        patience: 5,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let run = |seed| {
        let net = EvidentialNetwork::new(&arch, Parameterization::Exp, true, seed).unwrap();
        train(
            net,
            &tr,
            &va,
            &TrainConfig {
                seed,
                ..cfg.clone()
            },
        )
        .unwrap()
    };
    let (a, ha) = run(5);
    let (b, hb) = run(5);
    let (c, _) = run(6);
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_ne!(a, c);
}
