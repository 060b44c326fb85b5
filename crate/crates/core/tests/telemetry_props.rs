use kinhmd::telemetry::{
    check_staleness, extract_sample, parse_packet, ChannelMap, DataPacket, DataRecord, FeedState, FeedStatus, PacketError,
};
use proptest::prelude::*;

fn record() -> impl Strategy<Value = DataRecord> {
    (any::<u32>(), prop::array::uniform8(any::<u32>())).prop_map(|(index, bits)| DataRecord { index, values: bits.map(f32::from_bits) })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn parser_is_total(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
        match parse_packet(&bytes) {
            Ok(p) => prop_assert_eq!(5 + p.records.len() * 36, bytes.len()),
            Err(PacketError::NotDataPacket) => prop_assert!(!bytes.starts_with(b"DATA\0")),
            Err(PacketError::Malformed { offset }) => prop_assert!(offset < bytes.len()),
        }
    }

    #[test]
    fn header_then_garbage(body in prop::collection::vec(any::<u8>(), 0..400)) {
        let mut bytes = b"DATA\0".to_vec();
        bytes.extend(&body);
        let r = parse_packet(&bytes);
        prop_assert_eq!(r.is_ok(), body.len() % 36 == 0);
        if let Ok(p) = r {
            let _ = extract_sample(&p, &ChannelMap::default(), 0.0);
        }
    }

    #[test]
    fn round_trip(records in prop::collection::vec(record(), 0..20)) {
        let pkt = DataPacket { records };
        let bytes = pkt.encode();
        prop_assert_eq!(parse_packet(&bytes).unwrap(), pkt.clone());
        prop_assert_eq!(parse_packet(&bytes).unwrap().encode(), bytes);
    }

    #[test]
    fn extracted_samples_are_finite(records in prop::collection::vec(record(), 0..6), idx in 0u32..4) {
        let map = ChannelMap::new(idx, [5, 6, 4], 9.81).unwrap();
        if let Some(s) = extract_sample(&DataPacket { records }, &map, 1.0) {
            prop_assert!(s.accel.iter().all(|v| v.is_finite()));
            prop_assert_eq!(s.timestamp, 1.0);
        }
    }

    /// Once stale, only a strictly newer sample brings the feed back.
    #[test]
    fn staleness_is_sticky(ops in prop::collection::vec((any::<bool>(), 0.0f64..2.0), 1..60)) {
        let mut st = FeedStatus::new(0.2);
        let mut now = 0.0;
        for (is_sample, step) in ops {
            now += step * 0.2;
            let before = st;
            if is_sample {
                // sample stamps may lag the clock or repeat
                let ts = now - step * 0.1;
                st = st.record_sample(ts);
                let newer = before.last_sample_time.is_none_or(|l| ts > l);
                if before.state == FeedState::Stale && !newer {
                    prop_assert_eq!(st.state, FeedState::Stale);
                }
                if newer {
                    prop_assert_eq!(st.last_sample_time, Some(ts));
                }
            } else {
                st = check_staleness(st, now);
                if before.state == FeedState::Stale {
                    prop_assert_eq!(st.state, FeedState::Stale);
                }
                if let Some(last) = st.last_sample_time {
                    if now - last > 0.2 {
                        prop_assert_eq!(st.state, FeedState::Stale);
                    }
                }
            }
        }
    }
}
