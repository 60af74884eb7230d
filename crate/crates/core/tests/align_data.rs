use mag_core::align::{align_average, FrameTrack, WordSpan};
use mag_core::data::{
    dataset_to_jsonl, generate_synthetic, generate_synthetic_with, load_dataset, save_dataset,
    StreamSeeds, SynthConfig,
};
use proptest::prelude::*;

/// Sorted spans with gaps, plus frame timestamps in [0, horizon).
fn spans_and_track() -> impl Strategy<Value = (Vec<WordSpan>, FrameTrack)> {
    let spans = prop::collection::vec((0.01f64..0.5, 0.0f64..0.3), 0..8).prop_map(|parts| {
        let mut t = 0.0;
        parts
            .into_iter()
            .map(|(len, gap)| {
                let s = WordSpan::new(t + gap, t + gap + len);
                t = s.end;
                s
            })
            .collect::<Vec<_>>()
    });
    let frames = (1usize..4).prop_flat_map(|d| {
        prop::collection::vec((0.001f64..0.1, prop::collection::vec(-5.0f64..5.0, d)), 0..40)
            .prop_map(move |steps| {
                let mut t = 0.0;
                let mut ts = Vec::new();
                let mut rows = Vec::new();
                for (dt, row) in steps {
                    t += dt;
                    ts.push(t);
                    rows.push(row);
                }
                FrameTrack::new(ts, rows, d).unwrap()
            })
    });
    (spans, frames)
}

fn covered<'a>(span: &WordSpan, track: &'a FrameTrack) -> Vec<&'a Vec<f64>> {
    track
        .timestamps()
        .iter()
        .zip(track.features())
        .filter(|(t, _)| span.start <= **t && **t < span.end)
        .map(|(_, r)| r)
        .collect()
}

proptest! {
    #[test]
    fn rows_within_covered_range((spans, track) in spans_and_track()) {
        let a = align_average(&spans, &track).unwrap();
        prop_assert_eq!(a.rows.len(), spans.len());
        for (w, span) in spans.iter().enumerate() {
            let frames = covered(span, &track);
            prop_assert_eq!(frames.is_empty(), a.empty.contains(&w));
            if frames.is_empty() {
                prop_assert!(a.rows[w].iter().all(|x| *x == 0.0));
                continue;
            }
            for k in 0..track.dim() {
                let lo = frames.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
                let hi = frames.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(a.rows[w][k] >= lo - 1e-12 && a.rows[w][k] <= hi + 1e-12);
            }
        }
    }

    // Timestamps must stay strictly increasing, so each copy sits a hair
    // after its original, inside the same span.
    #[test]
    fn duplicating_every_frame_changes_nothing((spans, track) in spans_and_track()) {
        let ts = track.timestamps();
        let mut dts = Vec::new();
        let mut rows = Vec::new();
        for (i, (t, r)) in ts.iter().zip(track.features()).enumerate() {
            let next = ts.get(i + 1).copied().unwrap_or(t + 1.0);
            let boundary = spans
                .iter()
                .flat_map(|s| [s.start, s.end])
                .filter(|b| b > t)
                .fold(next, f64::min);
            dts.push(*t);
            rows.push(r.clone());
            dts.push(t + (boundary - t) / 2.0);
            rows.push(r.clone());
        }
        let doubled = FrameTrack::new(dts, rows, track.dim()).unwrap();
        let a = align_average(&spans, &track).unwrap();
        let b = align_average(&spans, &doubled).unwrap();
        prop_assert_eq!(&a.empty, &b.empty);
        for (x, y) in a.rows.iter().flatten().zip(b.rows.iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn splitting_a_frame_into_half_weights_changes_nothing(
        (spans, track) in spans_and_track(),
        pick in any::<prop::sample::Index>(),
    ) {
        prop_assume!(!track.timestamps().is_empty());
        let ts = track.timestamps();
        let i = pick.index(ts.len());
        let next = ts.get(i + 1).copied().unwrap_or(ts[i] + 1.0);
        let boundary = spans
            .iter()
            .flat_map(|s| [s.start, s.end])
            .filter(|b| *b > ts[i])
            .fold(next, f64::min);
        let mut nts = ts.to_vec();
        let mut rows = track.features().to_vec();
        let mut weights = vec![1.0; ts.len()];
        nts.insert(i + 1, ts[i] + (boundary - ts[i]) / 2.0);
        rows.insert(i + 1, rows[i].clone());
        weights[i] = 0.5;
        weights.insert(i + 1, 0.5);
        let split = FrameTrack::new(nts, rows, track.dim()).unwrap().with_weights(weights).unwrap();
        let a = align_average(&spans, &track).unwrap();
        let b = align_average(&spans, &split).unwrap();
        for (x, y) in a.rows.iter().flatten().zip(b.rows.iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}

fn small(lambda_nv: f64, noise_sigma: f64) -> SynthConfig {
    SynthConfig {
        n_examples: 200,
        lambda_nv,
        noise_sigma,
        seed: 7,
        ..Default::default()
    }
}

#[test]
fn lambda_zero_ignores_nonverbal_resampling() {
    let cfg = small(0.0, 0.2);
    let base = generate_synthetic(&cfg).unwrap();
    let other = generate_synthetic_with(&cfg, StreamSeeds { nonverbal: 999, ..StreamSeeds::from_master(cfg.seed) }).unwrap();
    assert_ne!(base[0].acoustic, other[0].acoustic);
    for (a, b) in base.iter().zip(&other) {
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.label, b.label);
    }
}

#[test]
fn lambda_one_ignores_token_resampling() {
    let cfg = small(1.0, 0.0);
    let base = generate_synthetic(&cfg).unwrap();
    let other = generate_synthetic_with(&cfg, StreamSeeds { tokens: 999, ..StreamSeeds::from_master(cfg.seed) }).unwrap();
    assert!(base.iter().zip(&other).any(|(a, b)| a.tokens != b.tokens));
    for (a, b) in base.iter().zip(&other) {
        assert_eq!(a.label, b.label);
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let cfg = small(0.5, 0.1);
    let a = dataset_to_jsonl(&generate_synthetic(&cfg).unwrap()).unwrap();
    let b = dataset_to_jsonl(&generate_synthetic(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    let c = dataset_to_jsonl(&generate_synthetic(&SynthConfig { seed: 8, ..cfg }).unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn generated_examples_are_valid_and_reload() {
    let cfg = small(0.5, 0.3);
    let data = generate_synthetic(&cfg).unwrap();
    for (i, ex) in data.iter().enumerate() {
        ex.validate(i + 1).unwrap();
        assert!((cfg.min_len..=cfg.max_len).contains(&ex.len()));
        assert_eq!(ex.d_a(), cfg.d_a);
        assert_eq!(ex.d_v(), cfg.d_v);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_dataset(&path, &data).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, data);
    let first = std::fs::read(&path).unwrap();
    save_dataset(&path, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn missing_file_is_io_error() {
    let err = load_dataset("/nonexistent/dir/x.jsonl").unwrap_err();
    assert_eq!(err.kind(), "io");
}

#[test]
fn symmetric_rates_give_centered_labels() {
    for (seed, lambda) in [(1u64, 0.0), (2, 0.5), (3, 1.0)] {
        let cfg = SynthConfig {
            n_examples: 4000,
            lambda_nv: lambda,
            seed,
            ..Default::default()
        };
        let labels: Vec<f64> = generate_synthetic(&cfg).unwrap().iter().map(|e| e.label).collect();
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let sd = (labels.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() <= 3.0 * sd / n.sqrt(), "lambda {lambda}: mean {mean}, sd {sd}");
    }
}
