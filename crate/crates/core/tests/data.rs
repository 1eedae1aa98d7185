//! Scene generator, file formats and normalization.

use haarnet::data::tensorfile::{self, decode, encode};
use haarnet::data::{
    decode_pnm, encode_pnm, generate_dataset, load_dataset, load_pnm, normalize, synth_scene,
    ChannelStats, NdArray, Raster,
};
use haarnet::error::Error;
use haarnet::tensor::{Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn occlusion_consistency_over_100_seeds() {
    for seed in 0..100 {
        let s = synth_scene(seed, 40, 48, 6).unwrap();
        assert!((3..=7).contains(&s.shapes.len()));
        for y in 0..40 {
            for x in 0..48 {
                let nearest = s
                    .shapes
                    .iter()
                    .filter(|p| p.kind.contains(y, x))
                    .min_by(|a, b| a.depth.total_cmp(&b.depth));
                let want = nearest.map_or(0, |p| p.class);
                assert_eq!(s.labels.get(0, y, x), want, "seed {seed} pixel ({y}, {x})");
                if let Some(p) = nearest {
                    assert_eq!(s.depth.at(0, 0, y, x), p.depth);
                }
            }
        }
        let mut hist = [0usize; 6];
        s.labels.data().iter().for_each(|&l| hist[l as usize] += 1);
        assert!(hist[0] > 0 && hist[1..].iter().any(|&n| n > 0));
        assert!(hist[1..].iter().all(|&n| n == 0 || n >= 16));
        assert!(s
            .rgb
            .data()
            .iter()
            .chain(s.depth.data())
            .all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(
        synth_scene(7, 32, 32, 5).unwrap(),
        synth_scene(7, 32, 32, 5).unwrap()
    );
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        generate_dataset(d.path(), 3, 32, 32, 4, 11).unwrap();
    }
    for seed in 11..14 {
        for f in ["rgb.mten", "depth.mten", "labels.mten"] {
            let path = |i: usize| dirs[i].path().join("scenes").join(seed.to_string()).join(f);
            assert_eq!(
                std::fs::read(path(0)).unwrap(),
                std::fs::read(path(1)).unwrap()
            );
        }
    }
    let loaded = load_dataset(dirs[0].path()).unwrap();
    assert_eq!(
        loaded.iter().map(|s| s.seed).collect::<Vec<_>>(),
        vec![11, 12, 13]
    );
    assert_eq!(loaded[1].labels, synth_scene(12, 32, 32, 4).unwrap().labels);
}

#[test]
fn palette_limit() {
    match synth_scene(0, 32, 32, 9) {
        Err(Error::Config(m)) => assert!(m.contains("palette")),
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn tensorfile_header_and_errors() {
    let t = Tensor::zeros(Shape::new(1, 3, 4, 4));
    let bytes = encode(&NdArray::from(&t));
    assert_eq!(bytes.len() - 4 * 48, 42);
    assert_eq!(&bytes[..4], b"MTEN");
    match decode(&bytes[..bytes.len() - 1]) {
        Err(Error::Format { message, .. }) => assert!(
            message.contains("192") && message.contains("191"),
            "{message}"
        ),
        other => panic!("expected a format error, got {other:?}"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
    let mut dtype = bytes;
    dtype[8] = 7;
    assert!(matches!(
        decode(&dtype),
        Err(Error::Format { offset: 8, .. })
    ));
}

proptest! {
    #[test]
    fn tensorfile_round_trip(dims in proptest::collection::vec(0usize..5, 0..=4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        // arbitrary bit patterns, NaN payloads included
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random())).collect();
        let a = NdArray::new(dims, data).unwrap();
        let back = decode(&encode(&a)).unwrap();
        prop_assert_eq!(&back.dims, &a.dims);
        prop_assert_eq!(
            back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn entry_directory_round_trip(names in proptest::collection::btree_set("[a-z.]{1,12}", 1..5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arrays: Vec<(String, NdArray)> = names
            .into_iter()
            .map(|n| {
                let dims = vec![rng.random_range(1..4), rng.random_range(1..4)];
                let data = (0..dims[0] * dims[1]).map(|_| rng.random()).collect();
                (n, NdArray::new(dims, data).unwrap())
            })
            .collect();
        let bytes = tensorfile::encode_entries(arrays.iter().map(|(n, a)| (n.as_str(), a)));
        prop_assert_eq!(tensorfile::decode_entries(&bytes).unwrap(), arrays);
    }
}

#[test]
fn pnm_examples() {
    let mut p5 = b"P5\n2 2\n255\n".to_vec();
    p5.extend_from_slice(&[0, 255, 128, 64]);
    let t = decode_pnm(&p5).unwrap().to_tensor();
    assert_eq!(t.shape(), Shape::new(1, 1, 2, 2));
    assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    assert!((t.data()[2] - 0.50196).abs() < 1e-5);

    let mut p6 = b"P6 # comment\n1 1\n255\n".to_vec();
    p6.extend_from_slice(&[255, 0, 0]);
    assert_eq!(
        decode_pnm(&p6).unwrap().to_tensor().data(),
        &[1.0, 0.0, 0.0]
    );

    assert!(matches!(
        decode_pnm(b"P2\n1 1\n255\n0\n"),
        Err(Error::Unsupported(_))
    ));
    assert!(matches!(
        decode_pnm(b"P5\n1 1\n65535\n\0\0"),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn pnm_agrees_with_the_image_crate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for channels in [1, 3] {
        let (w, h) = (13, 7);
        let raster = Raster {
            width: w,
            height: h,
            channels,
            pixels: (0..w * h * channels).map(|_| rng.random()).collect(),
        };
        let bytes = encode_pnm(&raster);
        let reference =
            image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm).unwrap();
        let dump = if channels == 1 {
            reference.to_luma8().into_raw()
        } else {
            reference.to_rgb8().into_raw()
        };
        assert_eq!(dump, raster.pixels);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pnm");
        std::fs::write(&path, &bytes).unwrap();
        let t = load_pnm(&path).unwrap();
        for y in 0..h {
            for x in 0..w {
                for c in 0..channels {
                    assert_eq!(
                        t.at(0, c, y, x),
                        dump[(y * w + x) * channels + c] as f32 / 255.0
                    );
                }
            }
        }
    }
}

#[test]
fn normalization_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images: Vec<Tensor> = (0..8)
        .map(|_| Tensor::uniform(Shape::new(1, 3, 6, 5), 0.0, 1.0, &mut rng))
        .collect();
    let stats = ChannelStats::compute(&images).unwrap();
    for c in 0..3 {
        let v: Vec<f64> = images
            .iter()
            .flat_map(|t| t.plane(0, c).iter().map(|&a| a as f64))
            .collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((stats.mean[c] as f64 - m).abs() < 1e-6);
        assert!((stats.std[c] as f64 - sd).abs() < 1e-6);
    }
    let normed: Vec<Tensor> = images
        .iter()
        .map(|t| normalize(t, &stats).unwrap())
        .collect();
    let after = ChannelStats::compute(&normed).unwrap();
    for c in 0..3 {
        assert!(after.mean[c].abs() < 1e-5);
        assert!((after.std[c] - 1.0).abs() < 1e-4);
    }
}
