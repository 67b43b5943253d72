use ispeech_core::stream::{
    run_simulator, DropPolicy, Hub, Pace, RingBuffer, Segment, SimScript, StreamInfo,
};
use ispeech_core::synth::{SubjectModel, SynthParams};
use ispeech_core::{Chunk, ClassLabel, DeviceProfile};
use proptest::prelude::*;

/// Chunk `k` of a 2-channel ramp whose values encode (channel, sample index).
fn ramp_chunk(k: usize, n: usize) -> Chunk {
    let mut data = Vec::with_capacity(2 * n);
    for ch in 0..2 {
        for i in 0..n {
            data.push((ch * 100_000 + k * n + i) as f32);
        }
    }
    Chunk::new((k * n) as f64 / 250.0, 2, data).unwrap()
}

#[test]
fn buffer_tail_matches_replay_oracle() {
    let mut buf = RingBuffer::new(2, 250, 1000).unwrap();
    let mut pushed: Vec<Vec<f32>> = vec![Vec::new(); 2];
    for k in 0..41 {
        let c = ramp_chunk(k, 25);
        buf.append(&c).unwrap();
        for (ch, p) in pushed.iter_mut().enumerate() {
            p.extend_from_slice(c.channel(ch));
        }
    }
    assert_eq!(buf.write_cursor(), 1025);
    assert_eq!(buf.len(), 1000);
    let w = buf.latest_window(4.0).unwrap();
    for (ch, p) in pushed.iter().enumerate() {
        assert_eq!(w.channel(ch), &p[25..]);
    }
}

#[test]
fn window_after_525_samples() {
    let mut buf = RingBuffer::new(2, 250, 1000).unwrap();
    for k in 0..21 {
        buf.append(&ramp_chunk(k, 25)).unwrap();
    }
    let w = buf.latest_window(2.0).unwrap();
    assert_eq!(w.n_samples, 500);
    // samples 26..525 in one-based numbering
    assert_eq!(w.channel(0)[0], 25.0);
    assert_eq!(w.channel(0)[499], 524.0);
    assert_eq!(w.channel(1)[0], 100_025.0);
    assert!(w.contiguous);
    assert_eq!(buf.latest_window(2.0).unwrap(), w);
}

#[test]
fn consecutive_windows_overlap_by_all_but_one_chunk() {
    let mut buf = RingBuffer::new(2, 250, 1000).unwrap();
    for k in 0..20 {
        buf.append(&ramp_chunk(k, 25)).unwrap();
    }
    let a = buf.latest_window(2.0).unwrap();
    buf.append(&ramp_chunk(20, 25)).unwrap();
    let b = buf.latest_window(2.0).unwrap();
    assert_eq!(&a.channel(0)[25..], &b.channel(0)[..475]);
    assert!((b.start_timestamp_s - a.start_timestamp_s - 0.1).abs() < 1e-9);
}

#[test]
fn simulator_is_deterministic() {
    let profile = DeviceProfile::wireless();
    let subject = SubjectModel::population_member(3, 1, &profile, &SynthParams::default()).unwrap();
    let script = SimScript {
        subject_id: subject.subject_id.clone(),
        seed: 17,
        timeline: vec![
            Segment { label: ClassLabel::Rest, duration_s: 1.0 },
            Segment { label: ClassLabel::Bored, duration_s: 1.5 },
        ],
    };
    let run = || {
        let hub = Hub::new();
        let outlet = hub.open_outlet(StreamInfo::new("sim", profile.clone(), 0.1).unwrap()).unwrap();
        let inlet = hub.subscribe("sim").unwrap();
        let report = run_simulator(&profile, &script, &subject, &outlet, Pace::Headless).unwrap();
        (report, inlet.drain())
    };
    let (ra, a) = run();
    let (rb, b) = run();
    assert_eq!(ra, rb);
    assert_eq!(a.len(), 25);
    assert_eq!(
        a.iter().flat_map(|c| c.data.iter().map(|v| v.to_bits())).collect::<Vec<_>>(),
        b.iter().flat_map(|c| c.data.iter().map(|v| v.to_bits())).collect::<Vec<_>>()
    );
    assert_eq!(ra.markers.len(), 2);
    assert_eq!(ra.markers[1].label, ClassLabel::Bored);
}

proptest! {
    #[test]
    fn latest_window_equals_concat_then_slice(
        sizes in prop::collection::vec(1usize..150, 1..40),
        capacity in 1000usize..1400,
        window in 1usize..700,
    ) {
        let mut buf = RingBuffer::new(2, 250, capacity).unwrap();
        let mut all: Vec<f32> = Vec::new();
        let mut t = 0usize;
        for n in &sizes {
            let data: Vec<f32> = (0..2 * n).map(|i| if i < *n { (t + i) as f32 } else { -((t + i - n) as f32) }).collect();
            buf.append(&Chunk::new(t as f64 / 250.0, 2, data).unwrap()).unwrap();
            all.extend((0..*n).map(|i| (t + i) as f32));
            t += n;
            let w_s = window as f64 / 250.0;
            match buf.latest_window(w_s) {
                Some(w) => {
                    prop_assert!(all.len() >= window);
                    prop_assert_eq!(w.channel(0), &all[all.len() - window..]);
                    prop_assert_eq!(buf.latest_window(w_s), Some(w));
                }
                None => prop_assert!(all.len() < window),
            }
        }
    }

    #[test]
    fn drop_oldest_keeps_pushed_suffix(n_chunks in 1usize..60, capacity in 1usize..20) {
        let profile = DeviceProfile::wireless();
        let hub = Hub::new();
        let outlet = hub.open_outlet(StreamInfo::new("s", profile.clone(), 0.1).unwrap()).unwrap();
        let lossy = hub.subscribe_with_policy("s", DropPolicy::DropOldest { capacity }).unwrap();
        let lossless = hub.subscribe("s").unwrap();
        let mut pushed = Vec::new();
        for k in 0..n_chunks {
            let mut c = Chunk::zeros(k as f64 * 0.1, 12, 25);
            c.data[0] = k as f32;
            outlet.push_chunk(c.clone()).unwrap();
            pushed.push(c);
        }
        let kept = lossy.drain();
        prop_assert_eq!(&kept[..], &pushed[pushed.len() - kept.len()..]);
        prop_assert_eq!(kept.len(), n_chunks.min(capacity));
        prop_assert_eq!(lossy.dropped() as usize, n_chunks - kept.len());
        prop_assert_eq!(lossless.drain(), pushed);
    }
}
