use std::fs;

use chrono::{Datelike, Duration, Timelike};

use pmdm_core::data::{assemble, make_windows, split, synthesize, SplitSpec, SynthConfig, TrafficSeries, WindowSet};
use pmdm_core::temporal::{CalendarIndexer, Timestamp};
use pmdm_core::training::Normalizer;
use pmdm_tensor::Tensor;
use proptest::prelude::*;

fn series(steps: usize, nodes: usize, channels: usize, interval: u32) -> TrafficSeries {
    let values = (0..steps * nodes * channels).map(|i| (i as f64).sin() * 10.0 + 20.0).collect();
    TrafficSeries::new(
        Tensor::new(&[steps, nodes, channels], values).unwrap(),
        Timestamp::parse("2024-03-08T23:00").unwrap(),
        interval,
        (0..channels).map(|c| format!("ch{c}")).collect(),
    )
    .unwrap()
}

#[test]
fn binary_payload_length_must_match_the_shape() {
    let dir = tempfile::tempdir().unwrap();
    let s = series(2, 1, 1, 60);
    s.save(dir.path()).unwrap();
    let data = dir.path().join("data.bin");
    assert_eq!(fs::metadata(&data).unwrap().len(), 16);
    assert_eq!(TrafficSeries::load(dir.path()).unwrap(), s);

    let mut bytes = fs::read(&data).unwrap();
    bytes.push(0);
    fs::write(&data, &bytes).unwrap();
    let err = TrafficSeries::load(dir.path()).unwrap_err().to_string();
    assert!(err.contains("17 bytes"), "{err}");
}

#[test]
fn save_then_load_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let s = synthesize(&SynthConfig {
        channels: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    s.save(dir.path()).unwrap();
    let back = TrafficSeries::load(dir.path()).unwrap();
    let bits = |t: &TrafficSeries| t.data().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&s));
    assert_eq!(back.start(), s.start());
    assert_eq!(back.channel_names(), s.channel_names());
}

#[test]
fn csv_import_matches_the_hand_built_series() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.csv");
    fs::write(
        &path,
        "timestamp,node_id,channel_id,value\n\
         2024-01-01T00:05,1,0,4.5\n\
         2024-01-01T00:00,0,0,1.0\n\
         2024-01-01T00:05,0,0,3.25\n\
         2024-01-01T00:00,1,0,2.0\n",
    )
    .unwrap();
    let imported = TrafficSeries::from_csv(&path, 5, Some(vec!["flow".into()])).unwrap();
    let expected = TrafficSeries::new(
        Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.25, 4.5]).unwrap(),
        Timestamp::parse("2024-01-01T00:00").unwrap(),
        5,
        vec!["flow".into()],
    )
    .unwrap();
    assert_eq!(imported, expected);
}

#[test]
fn csv_import_rejects_gaps_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "timestamp,node_id,channel_id,value\n2024-01-01T00:00,0,0,1\n2024-01-01T00:10,0,0,2\n").unwrap();
    assert!(TrafficSeries::from_csv(&path, 5, None).is_err());
    fs::write(&path, "timestamp,node_id,channel_id,value\n2024-01-01T00:00,0,0,1\n2024-01-01T00:00,0,0,2\n").unwrap();
    assert!(TrafficSeries::from_csv(&path, 5, None).is_err());
}

#[test]
fn window_counts_at_the_boundary() {
    let s = series(5, 2, 1, 60);
    assert_eq!(make_windows(&s, 3, 2).unwrap().starts, vec![0]);
    let s = series(6, 2, 1, 60);
    assert_eq!(make_windows(&s, 3, 2).unwrap().starts, vec![0, 1]);
    assert!(make_windows(&series(4, 2, 1, 60), 3, 2).is_err());
}

#[test]
fn window_time_indices_match_the_calendar() {
    // Starts late on a Friday so the windows cross midnight and the weekend.
    let s = series(60, 2, 1, 30);
    let calendar = CalendarIndexer::new(30).unwrap();
    let windows = make_windows(&s, 6, 4).unwrap();
    let batch = assemble(&s, &windows.starts, 6, 4).unwrap();
    for (b, &start) in windows.starts.iter().enumerate() {
        for k in 0..10 {
            let dt = s.start().to_datetime() + Duration::minutes(30 * (start + k) as i64);
            let slot = (dt.hour() * 60 + dt.minute()) as usize / 30;
            let weekday = dt.weekday().num_days_from_monday() as usize;
            assert_eq!(batch.times.day[b * 10 + k], slot);
            assert_eq!(batch.times.week[b * 10 + k], weekday);
            assert_eq!(calendar.day_index(s.timestamp(start + k)), slot);
        }
        let step = s.step(start + 6);
        assert_eq!(&batch.targets.data()[b * 4 * 2..b * 4 * 2 + 2], step);
    }
}

#[test]
fn normaliser_uses_only_the_training_span() {
    let s = series(40, 3, 2, 60);
    let windows = make_windows(&s, 4, 4).unwrap();
    let [train, _, _] = split(&windows, &SplitSpec::default()).unwrap();
    let (lo, hi) = train.span().unwrap();
    assert!(hi < s.steps());
    let norm = Normalizer::fit(&s, lo, hi).unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (lo..hi)
            .flat_map(|k| (0..3).map(move |n| (k, n)))
            .map(|(k, n)| s.step(k)[n * 2 + c])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((norm.mean()[c] - mean).abs() < 1e-12);
    }
}

fn windows(total: usize) -> WindowSet {
    WindowSet {
        n: 12,
        m: 12,
        starts: (0..total).collect(),
    }
}

#[test]
fn split_sizes_for_both_ratios() {
    let sizes = |spec: &str| {
        split(&windows(10), &spec.parse().unwrap())
            .unwrap()
            .map(|w| w.len())
    };
    assert_eq!(sizes("7/1/2"), [7, 1, 2]);
    assert_eq!(sizes("6/2/2"), [6, 2, 2]);
}

proptest! {
    #[test]
    fn splits_partition_chronologically(total in 10usize..2000, ratio in prop_oneof![Just("7/1/2"), Just("6/2/2")]) {
        let all = windows(total);
        let parts = split(&all, &ratio.parse().unwrap()).unwrap();
        let joined: Vec<usize> = parts.iter().flat_map(|p| p.starts.iter().copied()).collect();
        prop_assert_eq!(&joined, &all.starts);
        prop_assert!(parts.iter().all(|p| !p.is_empty()));
        prop_assert!(parts[0].starts.iter().max() < parts[1].starts.iter().min());
        prop_assert!(parts[1].starts.iter().max() < parts[2].starts.iter().min());
    }
}
