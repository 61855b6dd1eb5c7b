use occtip::store::{Container, TensorData, ALIGN};
use occtip::Error;
use proptest::prelude::*;
use serde_json::{json, Value};

fn header_end(bytes: &[u8]) -> usize {
    16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize
}

fn payload_start(bytes: &[u8]) -> usize {
    header_end(bytes).div_ceil(ALIGN) * ALIGN
}

fn sample() -> Container {
    let mut c = Container::new(json!({"kind": "sample", "seed": 7}));
    c.push("x", vec![3, 2], TensorData::F32(vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0]));
    c.push("y", vec![2], TensorData::F64(vec![std::f64::consts::PI, f64::NAN]));
    c.push("ids", vec![4], TensorData::U32(vec![0, 1, u32::MAX, 7]));
    c.push("steps", vec![1, 1], TensorData::U64(vec![u64::MAX]));
    c
}

fn is_format(r: Result<Container, Error>) -> bool {
    matches!(r, Err(Error::Format { .. }))
}

#[test]
fn empty_container_round_trips() {
    let c = Container::new(Value::Null);
    let bytes = c.to_bytes().unwrap();
    let back = Container::from_bytes(&bytes).unwrap();
    assert!(back.entries.is_empty());
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

#[test]
fn small_f32_tensor_is_bitwise_identical() {
    let mut c = Container::new(Value::Null);
    let v = vec![0.1f32, 0.2, 0.3, -1e-30, 7.0, 1e30];
    c.push("t", vec![3, 2], TensorData::F32(v.clone()));
    let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
    match &back.entries[0].data {
        TensorData::F32(w) => assert!(v.iter().zip(w).all(|(a, b)| a.to_bits() == b.to_bits())),
        other => panic!("{other:?}"),
    }
    assert_eq!(back.entries[0].shape, vec![3, 2]);
}

#[test]
fn all_dtypes_round_trip_bitwise() {
    let c = sample();
    let bytes = c.to_bytes().unwrap();
    let back = Container::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.meta, c.meta);
    match &back.get("y").unwrap().data {
        TensorData::F64(v) => assert!(v[1].is_nan() && v[0] == std::f64::consts::PI),
        other => panic!("{other:?}"),
    }
}

#[test]
fn truncation_by_one_byte_is_rejected() {
    let bytes = sample().to_bytes().unwrap();
    match Container::from_bytes(&bytes[..bytes.len() - 1]) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64 - 1),
        other => panic!("{other:?}"),
    }
    for cut in [0, 3, 15, 16, header_end(&bytes) - 1] {
        assert!(is_format(Container::from_bytes(&bytes[..cut])), "cut {cut}");
    }
}

#[test]
fn structural_damage_reports_offsets() {
    let bytes = sample().to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Container::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Container::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(is_format(Container::from_bytes(&long)));
}

fn rebuild(bytes: &[u8], edit: impl FnOnce(&mut Value)) -> Vec<u8> {
    let mut header: Value = serde_json::from_slice(&bytes[16..header_end(bytes)]).unwrap();
    edit(&mut header);
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(out.len().div_ceil(ALIGN) * ALIGN, 0);
    out.extend_from_slice(&bytes[payload_start(bytes)..]);
    out
}

#[test]
fn overlapping_and_out_of_bounds_tensors_are_rejected() {
    let bytes = sample().to_bytes().unwrap();
    let overlap = rebuild(&bytes, |h| h["tensors"][1]["offset"] = h["tensors"][0]["offset"].clone());
    match Container::from_bytes(&overlap) {
        Err(Error::Format { msg, .. }) => assert!(msg.contains("overlaps"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let past = rebuild(&bytes, |h| h["tensors"][3]["shape"] = json!([1000]));
    assert!(is_format(Container::from_bytes(&past)));
    let misaligned = rebuild(&bytes, |h| h["tensors"][0]["offset"] = json!(4));
    assert!(is_format(Container::from_bytes(&misaligned)));
    let dtype = rebuild(&bytes, |h| h["tensors"][0]["dtype"] = json!("f16"));
    assert!(is_format(Container::from_bytes(&dtype)));
}

#[test]
fn unknown_header_fields_survive() {
    let bytes = sample().to_bytes().unwrap();
    let extended = rebuild(&bytes, |h| {
        h["producer"] = json!({"tool": "other", "rev": 3});
        h["tensors"][0]["units"] = json!("meters");
    });
    let c = Container::from_bytes(&extended).unwrap();
    assert_eq!(c.extra["producer"]["rev"], json!(3));
    assert_eq!(c.entries[0].extra["units"], json!("meters"));
    let again = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
    assert_eq!(again.extra, c.extra);
    assert_eq!(again.entries[0].extra, c.entries[0].extra);
    assert_eq!(c.to_bytes().unwrap(), again.to_bytes().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_containers_round_trip(
        f in proptest::collection::vec(any::<f64>(), 0..40),
        g in proptest::collection::vec(any::<f32>(), 0..40),
        u in proptest::collection::vec(any::<u64>(), 0..40),
        w in proptest::collection::vec(any::<u32>(), 0..40),
    ) {
        let mut c = Container::new(json!({"n": f.len()}));
        c.push("f", vec![f.len()], TensorData::F64(f.clone()));
        c.push("g", vec![g.len()], TensorData::F32(g.clone()));
        c.push("u", vec![u.len()], TensorData::U64(u.clone()));
        c.push("w", vec![1, w.len()], TensorData::U32(w.clone()));
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let bits = |d: &TensorData| match d {
            TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>(),
            TensorData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
            TensorData::U64(v) => v.clone(),
            TensorData::U32(v) => v.iter().map(|&x| x as u64).collect(),
        };
        for (a, b) in c.entries.iter().zip(&back.entries) {
            prop_assert_eq!(bits(&a.data), bits(&b.data));
            prop_assert_eq!(&a.shape, &b.shape);
        }
    }

    #[test]
    fn any_truncation_is_rejected(frac in 0.0f64..1.0) {
        let bytes = sample().to_bytes().unwrap();
        let cut = (frac * bytes.len() as f64) as usize;
        prop_assert!(is_format(Container::from_bytes(&bytes[..cut])));
    }

    #[test]
    fn payload_bit_flips_are_rejected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = sample().to_bytes().unwrap();
        let start = payload_start(&bytes);
        let at = start + pos.index(bytes.len() - start);
        bytes[at] ^= 1 << bit;
        prop_assert!(is_format(Container::from_bytes(&bytes)));
    }
}
