use std::fs;

use photon_da_core::depth::DepthMap;
use photon_da_core::io::{
    decode_cube, encode_cube, read_checkpoint, read_cube, read_depth, write_checkpoint, write_cube, write_depth,
    write_pgm16, Checkpoint, CountDtype, IoError,
};
use photon_da_core::simulator::{HistogramCube, Sbr, SimConfig};
use photon_da_core::stin::{Stin, StinConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn random_cube(bins: usize, nx: usize, ny: usize, max: u32, seed: u64) -> HistogramCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = (0..bins * nx * ny).map(|_| rng.random_range(0..=max)).collect();
    HistogramCube::new(bins, nx, ny, counts, SimConfig::new(bins, 80.0, Sbr::new(2.0, 50.0), seed)).unwrap()
}

fn meta_len(bytes: &[u8]) -> usize {
    u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize
}

#[test]
fn cube_round_trip_is_bitwise() {
    let dir = TempDir::new().unwrap();
    let cube = random_cube(128, 16, 16, 40, 1);
    let path = dir.path().join("a.cube");
    write_cube(&cube, &path, CountDtype::U16).unwrap();
    assert_eq!(read_cube(&path).unwrap(), cube);
    let bytes = fs::read(&path).unwrap();
    write_cube(&read_cube(&path).unwrap(), &path, CountDtype::U16).unwrap();
    assert_eq!(fs::read(&path).unwrap(), bytes);
    // No temporary files left behind.
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn paper_sized_u16_cube_file_size() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("p.cube");
    write_cube(&random_cube(1024, 32, 32, 3, 2), &path, CountDtype::U16).unwrap();
    let bytes = fs::read(&path).unwrap();
    let header = 4 + 2 + 2 + 3 * 4 + 4;
    assert_eq!(bytes.len(), header + 1024 * 32 * 32 * 2 + meta_len(&bytes));
    assert_eq!(&bytes[..4], b"PHDC");
}

#[test]
fn truncation_by_one_byte_is_reported() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("t.cube");
    write_cube(&random_cube(8, 3, 3, 9, 3), &path, CountDtype::U16).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    let err = read_cube(&path).unwrap_err();
    assert!(matches!(err, IoError::TruncatedPayload { .. }), "{err}");
    assert!(err.to_string().contains("truncated payload"));
}

#[test]
fn corrupted_headers_name_the_field() {
    let good = encode_cube(&random_cube(4, 2, 2, 5, 4), CountDtype::U16, None).unwrap();
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode_cube(&bad), Err(IoError::Magic { .. })));
    let mut bad = good.clone();
    bad[4] = 9;
    assert!(matches!(decode_cube(&bad), Err(IoError::Version(9))));
    let mut bad = good.clone();
    bad[6] = 8;
    assert!(matches!(decode_cube(&bad), Err(IoError::Header { field: "dtype", .. })));
    let mut bad = good.clone();
    bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    bad[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
    bad[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(decode_cube(&bad), Err(IoError::DimOverflow(_)) | Err(IoError::TruncatedPayload { .. })));
    let mut bad = good;
    bad[8..12].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(decode_cube(&bad), Err(IoError::Header { field: "dims", .. })));
}

#[test]
fn wide_counts_need_u32() {
    let cube = random_cube(4, 2, 2, 100_000, 5);
    assert!(matches!(encode_cube(&cube, CountDtype::U16, None), Err(IoError::CountOverflow { .. })));
    let bytes = encode_cube(&cube, CountDtype::U32, None).unwrap();
    assert_eq!(decode_cube(&bytes).unwrap(), cube);
}

#[test]
fn depth_and_graymap_files() {
    let dir = TempDir::new().unwrap();
    let mut map = DepthMap::from_fn(3, 5, |i, j| 0.25 * i as f64 + 0.5 * j as f64);
    map.set(1, 1, f64::NAN);
    let path = dir.path().join("d.depth");
    write_depth(&map, &path).unwrap();
    let back = read_depth(&path).unwrap();
    assert_eq!(back.dims(), (3, 5));
    for (a, b) in map.data().iter().zip(back.data()) {
        assert!((a.is_nan() && b.is_nan()) || (*a as f32) as f64 == *b);
    }
    let side = write_pgm16(&map, &dir.path().join("d.pgm")).unwrap();
    let pgm = fs::read(dir.path().join("d.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n5 3\n65535\n"));
    assert_eq!(pgm.len(), b"P5\n5 3\n65535\n".len() + 15 * 2);
    assert_eq!(fs::read_to_string(side).unwrap(), "min 0\nmax 2.5\n");
}

#[test]
fn checkpoint_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = StinConfig::toy();
    let params = Stin::new(cfg.clone()).unwrap().init_params::<f32>(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let _: u64 = rng.random();
    let ck = Checkpoint { config: cfg, rng: Some(rng.clone()), step: 42, params };
    let path = dir.path().join("m.ckpt");
    write_checkpoint(&ck, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert!(back.params.bit_eq(&ck.params));
    assert_eq!(back, ck);
    let (mut a, mut b) = (rng, back.rng.unwrap());
    assert_eq!(a.random::<u64>(), b.random::<u64>());
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_checkpoint(&path), Err(IoError::TruncatedPayload { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_cube_round_trips(bins in 1usize..20, nx in 1usize..6, ny in 1usize..6, seed in any::<u64>(), wide in any::<bool>()) {
        let max = if wide { u32::MAX } else { u16::MAX as u32 };
        let cube = random_cube(bins, nx, ny, max, seed);
        let dtype = if wide { CountDtype::U32 } else { CountDtype::U16 };
        let bytes = encode_cube(&cube, dtype, Some(seed)).unwrap();
        prop_assert_eq!(decode_cube(&bytes).unwrap(), cube);
        for cut in [1, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(decode_cube(&bytes[..cut]).is_err());
        }
    }
}
