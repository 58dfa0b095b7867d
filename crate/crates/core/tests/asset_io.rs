use nalgebra::Vector3;
use proptest::prelude::*;
use splat_lod::io::asset::{
    self, container_bytes, decode_asset, parse_container, write_asset_container, write_asset_dir, CHUNKS_FILE,
    LEVELS_FILE, MANIFEST_FILE,
};
use splat_lod::io::read_asset;
use splat_lod::pipeline::{build, BuildConfig, BuildOutput};
use splat_lod::synth::random_scene;
use splat_lod::{Camera, Scene};

fn small_build() -> (Scene, BuildOutput) {
    let mut scene = random_scene(21, 400, 1);
    for (i, g) in scene.gaussians.iter_mut().enumerate() {
        g.mean.x += (i % 20) as f64;
    }
    let cams: Vec<Camera> = (0..6)
        .map(|i| {
            let p = Vector3::new(i as f64 * 3.0, 0.0, -2.0);
            Camera::look_at(p, p + Vector3::z(), -Vector3::y(), 40.0, 48, 32)
        })
        .collect();
    let cfg = BuildConfig { thresholds: Some(vec![4.0, 9.0]), ..Default::default() };
    let out = build(&scene, &cams, &cfg).unwrap();
    (scene, out)
}

fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

#[test]
fn directory_and_container_agree_and_round_trip() {
    let (_, out) = small_build();
    let dir = tempfile::tempdir().unwrap();
    let asset_dir = dir.path().join("asset");
    write_asset_dir(&asset_dir, &out.asset).unwrap();
    for f in [MANIFEST_FILE, LEVELS_FILE, CHUNKS_FILE] {
        assert!(asset_dir.join(f).is_file(), "{f}");
    }
    let file = dir.path().join("asset.splatlod");
    write_asset_container(&file, &out.asset).unwrap();
    let a = read_asset(&asset_dir).unwrap();
    let b = read_asset(&file).unwrap();
    assert_eq!(a, b);

    assert_eq!(a.levels.len(), out.levels.len());
    for (got, want) in a.levels.iter().zip(&out.levels) {
        assert_eq!(got.level, want.level);
        assert_eq!(got.provenance, want.provenance);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.gaussians.iter().zip(&want.gaussians) {
            for k in 0..3 {
                assert_eq!(g.mean[k], f32r(w.mean[k]));
                assert_eq!(g.scale[k], f32r(w.scale[k]));
            }
            assert_eq!(g.opacity, f32r(w.opacity));
            assert_eq!(g.filter_variance, f32r(w.filter_variance));
            assert_eq!(g.sh_coeffs, w.sh_coeffs.iter().map(|&c| f32r(c)).collect::<Vec<_>>());
        }
    }
    assert_eq!(a.plan.active_sets, out.plan.active_sets);
    assert_eq!(a.plan.source_camera_assignment, out.plan.source_camera_assignment);
    for (c, w) in a.plan.centers.iter().zip(&out.plan.centers) {
        assert_eq!(*c, w.map(f32r));
    }
    assert_eq!(a.manifest.thresholds(), vec![4.0, 9.0]);
}

#[test]
fn manifest_describes_sections() {
    let (_, out) = small_build();
    let m: serde_json::Value = serde_json::from_slice(&out.asset.manifest_bytes).unwrap();
    assert_eq!(m["format_version"], 1);
    assert_eq!(m["sh_degree"], 1);
    assert_eq!(m["record_floats"], 12 + 3 * 4);
    assert_eq!(m["index_encoding"], "raw");
    assert_eq!(m["levels"].as_array().unwrap().len(), 3);
    assert_eq!(m["sections"]["levels"]["length"], out.asset.levels_bin.len());
    assert_eq!(m["sections"]["levels"]["sha256"], asset::sha256_hex(&out.asset.levels_bin));
    assert_eq!(m["sections"]["chunks"]["sha256"], asset::sha256_hex(&out.asset.chunks_bin));
    // One record plus one u32 provenance entry per Gaussian.
    let count: usize = out.levels.iter().map(|l| l.len()).sum();
    assert_eq!(out.asset.levels_bin.len(), count * 4 * (12 + 12 + 1));
}

#[test]
fn rebuild_is_byte_identical() {
    let (_, a) = small_build();
    let (_, b) = small_build();
    assert_eq!(container_bytes(&a.asset), container_bytes(&b.asset));
}

#[test]
fn corrupt_sections_are_rejected() {
    let (_, out) = small_build();
    let mut levels = out.asset.levels_bin.clone();
    levels[7] ^= 0x40;
    assert!(decode_asset(&out.asset.manifest_bytes, &levels, &out.asset.chunks_bin).is_err());
    let short = &out.asset.chunks_bin[..out.asset.chunks_bin.len() - 4];
    assert!(decode_asset(&out.asset.manifest_bytes, &out.asset.levels_bin, short).is_err());
    let bytes = container_bytes(&out.asset);
    assert!(parse_container(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(parse_container(&extra).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mutated_manifest_never_panics(pos in any::<prop::sample::Index>(), byte in any::<u8>(), cut in any::<prop::sample::Index>()) {
        let (_, out) = small_build_cached();
        let mut m = out.asset.manifest_bytes.clone();
        let i = pos.index(m.len());
        m[i] = byte;
        let _ = decode_asset(&m, &out.asset.levels_bin, &out.asset.chunks_bin);
        let c = cut.index(m.len());
        let _ = decode_asset(&m[..c], &out.asset.levels_bin, &out.asset.chunks_bin);
    }

    #[test]
    fn mutated_container_never_panics(pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let (_, out) = small_build_cached();
        let mut bytes = container_bytes(&out.asset);
        let i = pos.index(bytes.len());
        let changed = bytes[i] != byte;
        bytes[i] = byte;
        let r = parse_container(&bytes);
        // Every byte is covered by the header checks or a section checksum.
        prop_assert!(!changed || r.is_err());
    }
}

fn small_build_cached() -> &'static (Scene, BuildOutput) {
    static CACHE: std::sync::OnceLock<(Scene, BuildOutput)> = std::sync::OnceLock::new();
    CACHE.get_or_init(small_build)
}
