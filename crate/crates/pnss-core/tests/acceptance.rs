//! Acceptance suite: one test per criterion, each printing its own
//! pass/fail line through the harness.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use pnss_core::cluster::{cut, ward_cluster, ward_linkage, Dendrogram, DistanceMatrix, LinkageVariant, Merge};
use pnss_core::markov::{
    equilibrium, hellinger_distance, pool_transition_matrix, StateSequence, TransitionMatrix,
};
use pnss_core::pca::fit_shape_pca;
use pnss_core::pipeline::thin_indices;
use pnss_core::pns::{
    fit_subsphere, pns_decompose, pns_reconstruct, tangent_pca_variance_shares,
    variance_by_component,
};
use pnss_core::pnss::{choose_component_count, embed_on_sphere, sphere_to_pc_scores};
use pnss_core::procrustes::{gpa, inner_product, vertical_basis, Configuration};
use pnss_core::sphere::{rotate_axis_to_pole, SpherePoint};
use pnss_core::synth::{synthesize, SyntheticSpec};

/// Table of overall transition probabilities used as a fixture (4 states,
/// entries rounded to 4 decimal places).
const OVERALL_TRANSITIONS: [[f64; 4]; 4] = [
    [0.8628, 0.0712, 0.0135, 0.0525],
    [0.0744, 0.7480, 0.1608, 0.0168],
    [0.0069, 0.0893, 0.8501, 0.0537],
    [0.0655, 0.0178, 0.1588, 0.7578],
];

/// Reported equilibrium of the fixture chain, rounded to 3 decimal places.
const OVERALL_EQUILIBRIUM: [f64; 4] = [0.213, 0.218, 0.416, 0.153];

fn fixture_matrix() -> TransitionMatrix {
    let probs = DMatrix::from_fn(4, 4, |r, c| OVERALL_TRANSITIONS[r][c]);
    TransitionMatrix::from_probabilities(probs).expect("fixture rows are stochastic within 5e-4")
}

fn random_point(rng: &mut ChaCha8Rng, dim: usize) -> SpherePoint {
    loop {
        let v = DVector::from_fn(dim + 1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        if v.norm() > 1e-3 {
            return SpherePoint::from_unnormalized(v).unwrap();
        }
    }
}

fn random_configuration(rng: &mut ChaCha8Rng, k: usize, m: usize) -> Configuration {
    loop {
        let pts = DMatrix::from_fn(k, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        if let Ok(c) = Configuration::new(pts) {
            return c;
        }
    }
}

#[test]
fn criterion_01_equilibrium_reproduction() {
    let fixture = fixture_matrix();
    let start = Instant::now();
    let eq = equilibrium(&fixture).expect("fixture chain has a unique equilibrium");
    let elapsed = start.elapsed();
    for (i, &expected) in OVERALL_EQUILIBRIUM.iter().enumerate() {
        let got = eq.probs()[i];
        assert!(
            (got - expected).abs() <= 0.005,
            "state {}: equilibrium {got} vs reported {expected}",
            i + 1
        );
    }
    assert!(
        elapsed.as_secs_f64() < 1e-3,
        "equilibrium took {elapsed:?}, budget 1 ms"
    );
}

#[test]
fn criterion_02_transition_table_stochasticity() {
    for (r, row) in OVERALL_TRANSITIONS.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        assert!(
            (sum - 1.0).abs() <= 5e-4,
            "row {} sums to {sum}, outside 1 ± 5e-4",
            r + 1
        );
    }
    // And the constructor accepts the fixture as parsed.
    let m = fixture_matrix();
    for r in 0..4 {
        let sum: f64 = (0..4).map(|c| m.probs()[(r, c)]).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn criterion_03_thinning_fixture() {
    let kept = thin_indices(10_000, 100).expect("valid thinning");
    assert_eq!(kept.len(), 100);
    let expected: Vec<usize> = (0..100).map(|i| 1 + 101 * i).collect();
    assert_eq!(kept, expected, "thinned indices must be 1, 102, 203, …, 10000");
    assert_eq!(kept[98], 9899);
    assert_eq!(kept[99], 10_000);
}

/// Closed-form radius objective on a 2° axis grid.
fn grid_oracle_objective(points: &[SpherePoint]) -> f64 {
    let step = 2.0_f64.to_radians();
    let mut best = f64::INFINITY;
    let mut polar = 0.0;
    while polar <= PI + 1e-12 {
        let mut az = 0.0;
        while az < 2.0 * PI {
            let axis = [
                polar.sin() * az.cos(),
                polar.sin() * az.sin(),
                polar.cos(),
            ];
            let distances: Vec<f64> = points
                .iter()
                .map(|p| {
                    let c = p.coords();
                    (c[0] * axis[0] + c[1] * axis[1] + c[2] * axis[2])
                        .clamp(-1.0, 1.0)
                        .acos()
                })
                .collect();
            let radius = distances.iter().sum::<f64>() / distances.len() as f64;
            let objective: f64 = distances.iter().map(|d| (d - radius) * (d - radius)).sum();
            if objective < best {
                best = objective;
            }
            az += step;
        }
        polar += step;
    }
    best
}

#[test]
fn criterion_04_subsphere_grid_oracle() {
    let start = Instant::now();
    // 50 seeded random instances: the fit never does worse than the grid.
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<SpherePoint> = (0..20).map(|_| random_point(&mut rng, 2)).collect();
        let fit = fit_subsphere(&points).expect("fit converges");
        let oracle = grid_oracle_objective(&points);
        assert!(
            fit.objective <= oracle + 1e-6,
            "seed {seed}: fitted objective {} exceeds grid oracle {}",
            fit.objective,
            oracle
        );
    }
    // Exact-circle instances recover the generating parameters.
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let axis = random_point(&mut rng, 2);
        let radius = 0.2 + 1.2 * rng.random::<f64>(); // inside (0, π/2)
        let rot = rotate_axis_to_pole(&axis);
        let inv = rot.transpose();
        let points: Vec<SpherePoint> = (0..20)
            .map(|i| {
                let theta = 2.0 * PI * i as f64 / 20.0;
                let local = DVector::from_row_slice(&[
                    radius.sin() * theta.cos(),
                    radius.sin() * theta.sin(),
                    radius.cos(),
                ]);
                SpherePoint::from_unnormalized(&inv * local).unwrap()
            })
            .collect();
        let fit = fit_subsphere(&points).expect("fit converges");
        assert!(
            (fit.subsphere.radius() - radius).abs() < 1e-8,
            "seed {seed}: radius {} vs {radius}",
            fit.subsphere.radius()
        );
        // Chord-form angle: plain arccos cannot resolve below ~1.5e-8.
        let chord = (fit.subsphere.axis().coords() - axis.coords()).norm();
        let angle = 2.0 * (chord / 2.0).asin();
        assert!(angle < 1e-8, "seed {seed}: axis error {angle}");
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 5.0,
        "subsphere oracle suite took {elapsed:?}, budget 5 s"
    );
}

#[test]
fn criterion_05_pns_beats_tangent_pca_on_curved_data() {
    // Small-circle data with arc spread : radial noise = 10 : 1.
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let axis = SpherePoint::from_unnormalized(DVector::from_row_slice(&[0.2, -0.4, 0.89])).unwrap();
    let rot = rotate_axis_to_pole(&axis);
    let inv = rot.transpose();
    let radius: f64 = 0.6;
    let arc_half_width = 0.5; // radians of arc angle
    // Arc-length spread of a uniform angle sweep is (width/√12)·sin(r);
    // radial noise is set to one tenth of it.
    let arc_spread = (2.0 * arc_half_width / 12f64.sqrt()) * radius.sin();
    let radial_sigma = arc_spread / 10.0;
    let points: Vec<SpherePoint> = (0..300)
        .map(|i| {
            let theta = -arc_half_width + 2.0 * arc_half_width * (i as f64 / 299.0);
            let rho = radius + radial_sigma * normal.sample(&mut rng);
            let local = DVector::from_row_slice(&[
                rho.sin() * theta.cos(),
                rho.sin() * theta.sin(),
                rho.cos(),
            ]);
            SpherePoint::from_unnormalized(&inv * local).unwrap()
        })
        .collect();

    let model = pns_decompose(&points).expect("decomposition");
    let pns_shares = variance_by_component(&model).expect("variance");
    let pca_shares = tangent_pca_variance_shares(&points).expect("tangent PCA");
    assert!(
        pns_shares[0] > pca_shares[0],
        "PNS component 1 share {} must exceed tangent-PCA share {}",
        pns_shares[0],
        pca_shares[0]
    );
}

#[test]
fn criterion_06_embedding_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let configs: Vec<Configuration> = (0..100)
        .map(|_| random_configuration(&mut rng, 6, 3))
        .collect();
    let gpa_result = gpa(&configs).expect("gpa");
    let pca = fit_shape_pca(&gpa_result).expect("pca");
    let p = choose_component_count(&pca, 0.9).expect("p");
    let embedded = embed_on_sphere(&gpa_result, &pca, p).expect("embedding");
    for (i, g) in embedded.iter().enumerate() {
        let recovered = sphere_to_pc_scores(g).expect("scores");
        let rho = gpa_result.fits[i].distance;
        let t_norm = pca.tangent_norms[i];
        for j in 0..p {
            let lambda = (rho / t_norm) * pca.scores[(i, j)];
            assert!(
                (recovered[j] - lambda).abs() < 1e-10,
                "fit {i} component {j}: {} vs {lambda}",
                recovered[j]
            );
        }
    }
    // The ‖U‖ = 0 special case maps to the pole exactly.
    let pole = pnss_core::pnss::sphere_to_pc_scores(
        &SpherePoint::new(DVector::from_row_slice(&[1.0, 0.0, 0.0, 0.0])).unwrap(),
    )
    .unwrap();
    assert_eq!(pole.iter().map(|v| v.abs()).sum::<f64>(), 0.0);
}

#[test]
fn criterion_07_vertical_basis_orthogonality() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let configs: Vec<Configuration> = (0..50)
        .map(|_| random_configuration(&mut rng, 10, 3))
        .collect();
    let gpa_result = gpa(&configs).expect("gpa");
    let basis = vertical_basis(&gpa_result.mean).expect("vertical basis");
    assert_eq!(basis.len(), 3);
    for (i, fit) in gpa_result.fits.iter().enumerate() {
        for (b_idx, b) in basis.iter().enumerate() {
            let ip = inner_product(b.matrix(), fit.fitted.matrix());
            assert!(
                ip.abs() < 1e-9,
                "fit {i}, basis {b_idx}: vertical component {ip}"
            );
        }
    }
}

#[test]
fn criterion_08_pns_reconstruction_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let points: Vec<SpherePoint> = (0..100).map(|_| random_point(&mut rng, 5)).collect();
    let model = pns_decompose(&points).expect("decomposition");
    for (i, p) in points.iter().enumerate() {
        let coords = model.coordinates.column(i).into_owned();
        let back = pns_reconstruct(&model, &coords).expect("reconstruction");
        // Chord-form arc distance; plain arccos bottoms out near 1.5e-8.
        let chord = (back.coords() - p.coords()).norm();
        let err = 2.0 * (chord / 2.0).asin();
        assert!(err < 1e-8, "observation {i}: reconstruction error {err}");
    }
}

/// Independent greedy Lance–Williams recursion (full-matrix, minimal-pair).
fn greedy_ward_oracle(d: &DistanceMatrix) -> Vec<Merge> {
    let n = d.len();
    let mut full = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            full[i][j] = d.get(i, j);
        }
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rows: Vec<usize> = (0..n).collect();
    let mut sizes: Vec<usize> = vec![1; n];
    let mut merges = Vec::new();
    for t in 0..(n - 1) {
        let mut best = (0usize, 1usize, f64::INFINITY);
        for a in 0..ids.len() {
            for b in (a + 1)..ids.len() {
                let dist = full[rows[a]][rows[b]];
                if dist < best.2 {
                    best = (a, b, dist);
                }
            }
        }
        let (a, b, height) = best;
        let (na, nb) = (sizes[a] as f64, sizes[b] as f64);
        for c in 0..ids.len() {
            if c == a || c == b {
                continue;
            }
            let nc = sizes[c] as f64;
            let total = na + nb + nc;
            let updated = (na + nc) / total * full[rows[c]][rows[a]]
                + (nb + nc) / total * full[rows[c]][rows[b]]
                - nc / total * height;
            full[rows[c]][rows[a]] = updated;
            full[rows[a]][rows[c]] = updated;
        }
        let (left, right) = if ids[a] < ids[b] {
            (ids[a], ids[b])
        } else {
            (ids[b], ids[a])
        };
        let size = sizes[a] + sizes[b];
        merges.push(Merge {
            left,
            right,
            height,
            size,
        });
        ids[a] = n + t;
        sizes[a] = size;
        ids.remove(b);
        rows.remove(b);
        sizes.remove(b);
    }
    merges
}

#[test]
fn criterion_09_ward_merge_sequence_oracle() {
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 + (seed as usize % 6); // 3..=8
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0))
            .collect();
        let d = DistanceMatrix::from_fn(n, |i, j| {
            let dx = pts[i].0 - pts[j].0;
            let dy = pts[i].1 - pts[j].1;
            Ok((dx * dx + dy * dy).sqrt())
        })
        .unwrap();
        let ours = ward_linkage(&d, LinkageVariant::WardD);
        let oracle = greedy_ward_oracle(&d);
        assert_eq!(ours.merges.len(), oracle.len());
        for (step, (got, want)) in ours.merges.iter().zip(oracle.iter()).enumerate() {
            assert_eq!(
                (got.left, got.right, got.size),
                (want.left, want.right, want.size),
                "seed {seed} step {step}: merge sequence diverged"
            );
            assert!(
                (got.height - want.height).abs() <= 1e-9 * want.height.max(1.0),
                "seed {seed} step {step}: heights {} vs {}",
                got.height,
                want.height
            );
        }
        // Assignments at every cut level must match as well.
        let oracle_dend = Dendrogram::from_parts(oracle, n);
        for k in 1..=n {
            let ours_labels = ward_cluster(&d, k).unwrap();
            let oracle_labels = cut(&oracle_dend, k).unwrap();
            assert_eq!(ours_labels, oracle_labels, "seed {seed}, k = {k}");
        }
    }
}

#[test]
fn criterion_10_end_to_end_state_recovery() {
    let start = Instant::now();
    let spec = SyntheticSpec {
        landmarks: 8,
        ambient_dim: 3,
        runs: 20,
        frames: 200,
        states: 4,
        dwell: 0.9,
        noise: 0.01,
        separation: 0.5,
        seed: 314,
    };
    let data = synthesize(&spec).expect("synthesis");
    let configs: Vec<Configuration> = data
        .dataset
        .runs
        .iter()
        .flat_map(|r| r.frames.iter().cloned())
        .collect();
    let truth: Vec<usize> = data.labels.iter().flatten().copied().collect();

    let gpa_result = gpa(&configs).expect("gpa");
    let pca = fit_shape_pca(&gpa_result).expect("pca");
    let p = choose_component_count(&pca, 0.9).expect("p");
    let embedded = embed_on_sphere(&gpa_result, &pca, p).expect("embedding");
    let distances =
        pnss_core::cluster::great_circle_distance_matrix(&embedded).expect("distances");
    let labels = ward_cluster(&distances, 4).expect("clustering");

    // Optimal label matching over all 4! permutations.
    let perms = permutations(&[1, 2, 3, 4]);
    let mut best_perm = None;
    let mut best_agreement = 0usize;
    for perm in &perms {
        let agreement = labels
            .iter()
            .zip(truth.iter())
            .filter(|(&l, &t)| perm[l - 1] == t)
            .count();
        if agreement > best_agreement {
            best_agreement = agreement;
            best_perm = Some(perm.clone());
        }
    }
    let agreement_rate = best_agreement as f64 / truth.len() as f64;
    assert!(
        agreement_rate >= 0.95,
        "cluster agreement {agreement_rate} below 0.95"
    );

    // Transition matrix from recovered labels vs the generator's chain.
    let perm = best_perm.unwrap();
    let mapped: Vec<usize> = labels.iter().map(|&l| perm[l - 1]).collect();
    let sequences: Vec<StateSequence> = (0..20)
        .map(|r| {
            StateSequence::new(
                format!("run{r}"),
                mapped[r * 200..(r + 1) * 200].to_vec(),
                4,
            )
            .unwrap()
        })
        .collect();
    let estimated = pool_transition_matrix(&sequences).expect("pooled matrix");
    let true_matrix = spec.true_transition_matrix();
    for r in 0..4 {
        for c in 0..4 {
            let diff = (estimated.probs()[(r, c)] - true_matrix[(r, c)]).abs();
            assert!(
                diff <= 0.05,
                "transition ({r},{c}): estimated {} vs true {} (diff {diff})",
                estimated.probs()[(r, c)],
                true_matrix[(r, c)]
            );
        }
    }

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 60.0,
        "end-to-end recovery took {elapsed:?}, budget 60 s"
    );
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut tail in permutations(&rest) {
            let mut perm = vec![first];
            perm.append(&mut tail);
            out.push(perm);
        }
    }
    out
}

#[test]
fn criterion_11_hellinger_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let random_stochastic = |rng: &mut ChaCha8Rng| {
        let mut m = DMatrix::zeros(4, 4);
        for r in 0..4 {
            let mut sum = 0.0;
            for c in 0..4 {
                let v: f64 = rng.random::<f64>() + 1e-6;
                m[(r, c)] = v;
                sum += v;
            }
            for c in 0..4 {
                m[(r, c)] /= sum;
            }
        }
        TransitionMatrix::from_probabilities(m).unwrap()
    };

    let t = random_stochastic(&mut rng);
    assert_eq!(hellinger_distance(&t, &t).unwrap(), 0.0);

    let id = TransitionMatrix::from_probabilities(DMatrix::identity(2, 2)).unwrap();
    let anti = TransitionMatrix::from_probabilities(DMatrix::from_row_slice(
        2,
        2,
        &[0.0, 1.0, 1.0, 0.0],
    ))
    .unwrap();
    let h = hellinger_distance(&id, &anti).unwrap();
    assert!(
        (h - std::f64::consts::SQRT_2).abs() < 1e-12,
        "H(I, antidiag) = {h}"
    );

    for trial in 0..1000 {
        let a = random_stochastic(&mut rng);
        let b = random_stochastic(&mut rng);
        let c = random_stochastic(&mut rng);
        let ab = hellinger_distance(&a, &b).unwrap();
        let ac = hellinger_distance(&a, &c).unwrap();
        let cb = hellinger_distance(&c, &b).unwrap();
        assert!(
            ab <= ac + cb + 1e-12,
            "trial {trial}: triangle inequality violated: {ab} > {ac} + {cb}"
        );
    }
}
