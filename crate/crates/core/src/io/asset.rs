//! Chunked LOD asset.
//!
//! Three sections:
//!
//! * `manifest.json`: [`AssetManifest`], pretty-printed JSON.
//! * `levels.bin`: for each level in order, the Gaussian records followed by
//!   the provenance indices. A record is `12 + 3·(deg+1)²` little-endian
//!   `f32`s: `mean(3) scale(3) rot(4: w x y z) opacity filter_variance sh(..)`
//!   with `sh` coefficient-major (`3·k + channel`). Provenance is `u32` LE.
//! * `chunks.bin`: for each chunk, for each level, its sorted `u32` LE index
//!   set into that level.
//!
//! All blob ranges in the manifest are relative to the start of their section.
//! The sections live either as three files in a directory or in one container
//! file: `b"SPLATLOD"`, `u32` version, `u32` section count, then per section
//! `u64` offset, `u64` length and a SHA-256, then the section bytes.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scene::{check_index_set, sh_terms, Camera, ChunkPlan, Gaussian, LodLevel};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const CONTAINER_MAGIC: &[u8; 8] = b"SPLATLOD";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LEVELS_FILE: &str = "levels.bin";
pub const CHUNKS_FILE: &str = "chunks.bin";

const SECTION_COUNT: u32 = 3;
const HEADER_LEN: usize = 8 + 4 + 4 + SECTION_COUNT as usize * (8 + 8 + 32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRange {
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDescriptor {
    pub level: usize,
    pub depth_threshold: f64,
    pub gaussian_count: u64,
    pub gaussians: BlobRange,
    pub provenance: BlobRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkDescriptor {
    pub id: usize,
    pub center: [f32; 3],
    pub radius: f32,
    pub camera_count: u64,
    /// One range per level into `chunks.bin`.
    pub index_sets: Vec<BlobRange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexEncoding {
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub length: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sections {
    pub levels: SectionInfo,
    pub chunks: SectionInfo,
}

/// Intrinsics of the camera that `render`/`bench` use when only a pose is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
}

impl RenderIntrinsics {
    pub fn from_camera(cam: &Camera) -> Self {
        Self {
            fx: cam.focal.x,
            fy: cam.focal.y,
            cx: cam.principal_point.x,
            cy: cam.principal_point.y,
            width: cam.resolution[0],
            height: cam.resolution[1],
            near: cam.near_plane,
        }
    }

    pub fn camera(&self, position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Camera {
        Camera {
            position,
            orientation,
            focal: Vector2::new(self.fx, self.fy),
            principal_point: Vector2::new(self.cx, self.cy),
            resolution: [self.width, self.height],
            near_plane: self.near,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildMetadata {
    pub tool_version: String,
    pub kmeans_seed: u64,
    pub perturb_seed: u64,
    /// SHA-256 of the canonical JSON of the build configuration.
    pub config_hash: String,
    pub thresholds_searched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetManifest {
    pub format_version: u32,
    pub sh_degree: usize,
    pub reference_focal: f64,
    pub filter_scale: f64,
    pub gamma: f64,
    pub index_encoding: IndexEncoding,
    pub record_floats: usize,
    pub levels: Vec<LevelDescriptor>,
    pub chunks: Vec<ChunkDescriptor>,
    pub camera_assignment: Vec<usize>,
    pub render_camera: RenderIntrinsics,
    pub sections: Sections,
    pub build: BuildMetadata,
}

impl AssetManifest {
    pub fn thresholds(&self) -> Vec<f64> {
        self.levels.iter().skip(1).map(|l| l.depth_threshold).collect()
    }
}

/// Everything [`encode_asset`] needs besides the levels and plan.
#[derive(Debug, Clone)]
pub struct AssetParams {
    pub sh_degree: usize,
    pub reference_focal: f64,
    pub filter_scale: f64,
    pub gamma: f64,
    pub render_camera: RenderIntrinsics,
    pub build: BuildMetadata,
}

/// Serialized sections of an asset.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedAsset {
    pub manifest: AssetManifest,
    pub manifest_bytes: Vec<u8>,
    pub levels_bin: Vec<u8>,
    pub chunks_bin: Vec<u8>,
}

/// A decoded asset. Values are the stored `f32`s widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct LodAsset {
    pub manifest: AssetManifest,
    pub levels: Vec<LodLevel>,
    pub plan: ChunkPlan,
}

impl LodAsset {
    pub fn render_camera(&self, position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Camera {
        self.manifest.render_camera.camera(position, orientation)
    }
}

pub fn record_floats(sh_degree: usize) -> usize {
    12 + 3 * sh_terms(sh_degree)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn asset_err(msg: impl Into<String>) -> Error {
    Error::Asset(msg.into())
}

pub fn encode_asset(levels: &[LodLevel], plan: &ChunkPlan, params: &AssetParams) -> Result<EncodedAsset> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("asset needs at least one level".into()));
    }
    let sizes: Vec<usize> = levels.iter().map(LodLevel::len).collect();
    plan.validate(&sizes)?;
    let rf = record_floats(params.sh_degree);
    let mut levels_bin = Vec::new();
    let mut level_desc = Vec::with_capacity(levels.len());
    for (l, level) in levels.iter().enumerate() {
        let start = levels_bin.len() as u64;
        for (i, g) in level.gaussians.iter().enumerate() {
            if g.sh_coeffs.len() != 3 * sh_terms(params.sh_degree) {
                return Err(Error::InvalidArgument(format!(
                    "level {l} gaussian {i}: {} sh coefficients, degree {} needs {}",
                    g.sh_coeffs.len(),
                    params.sh_degree,
                    3 * sh_terms(params.sh_degree)
                )));
            }
            let head = [
                g.mean.x,
                g.mean.y,
                g.mean.z,
                g.scale.x,
                g.scale.y,
                g.scale.z,
                g.rotation.w,
                g.rotation.i,
                g.rotation.j,
                g.rotation.k,
                g.opacity,
                g.filter_variance,
            ];
            for v in head.iter().chain(&g.sh_coeffs) {
                levels_bin.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let gauss = BlobRange { offset: start, length: (level.len() * rf * 4) as u64 };
        let prov_start = levels_bin.len() as u64;
        if level.provenance.len() != level.len() {
            return Err(Error::InvalidArgument(format!("level {l}: provenance length mismatch")));
        }
        for p in &level.provenance {
            levels_bin.extend_from_slice(&p.to_le_bytes());
        }
        level_desc.push(LevelDescriptor {
            level: l,
            depth_threshold: level.depth_threshold,
            gaussian_count: level.len() as u64,
            gaussians: gauss,
            provenance: BlobRange { offset: prov_start, length: (level.len() * 4) as u64 },
        });
    }

    let mut chunks_bin = Vec::new();
    let mut chunk_desc = Vec::with_capacity(plan.len());
    for (j, sets) in plan.active_sets.iter().enumerate() {
        let mut ranges = Vec::with_capacity(sets.len());
        for set in sets {
            let offset = chunks_bin.len() as u64;
            for i in set {
                chunks_bin.extend_from_slice(&i.to_le_bytes());
            }
            ranges.push(BlobRange { offset, length: (set.len() * 4) as u64 });
        }
        let c = plan.centers[j];
        chunk_desc.push(ChunkDescriptor {
            id: j,
            center: [c.x as f32, c.y as f32, c.z as f32],
            radius: plan.radii[j] as f32,
            camera_count: plan.source_camera_assignment.iter().filter(|&&a| a == j).count() as u64,
            index_sets: ranges,
        });
    }

    let manifest = AssetManifest {
        format_version: FORMAT_VERSION,
        sh_degree: params.sh_degree,
        reference_focal: params.reference_focal,
        filter_scale: params.filter_scale,
        gamma: params.gamma,
        index_encoding: IndexEncoding::Raw,
        record_floats: rf,
        levels: level_desc,
        chunks: chunk_desc,
        camera_assignment: plan.source_camera_assignment.clone(),
        render_camera: params.render_camera.clone(),
        sections: Sections {
            levels: SectionInfo { length: levels_bin.len() as u64, sha256: sha256_hex(&levels_bin) },
            chunks: SectionInfo { length: chunks_bin.len() as u64, sha256: sha256_hex(&chunks_bin) },
        },
        build: params.build.clone(),
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| asset_err(e.to_string()))?;
    Ok(EncodedAsset { manifest, manifest_bytes, levels_bin, chunks_bin })
}

pub fn write_asset_dir(dir: &Path, asset: &EncodedAsset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST_FILE), &asset.manifest_bytes)?;
    std::fs::write(dir.join(LEVELS_FILE), &asset.levels_bin)?;
    std::fs::write(dir.join(CHUNKS_FILE), &asset.chunks_bin)?;
    Ok(())
}

pub fn container_bytes(asset: &EncodedAsset) -> Vec<u8> {
    let sections = [&asset.manifest_bytes, &asset.levels_bin, &asset.chunks_bin];
    let total: usize = HEADER_LEN + sections.iter().map(|s| s.len()).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&SECTION_COUNT.to_le_bytes());
    let mut offset = HEADER_LEN as u64;
    for s in sections {
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(s.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(s));
        offset += s.len() as u64;
    }
    for s in sections {
        out.extend_from_slice(s);
    }
    out
}

pub fn write_asset_container(path: &Path, asset: &EncodedAsset) -> Result<()> {
    std::fs::write(path, container_bytes(asset))?;
    Ok(())
}

/// Reads either layout: a directory, or a container file.
pub fn read_asset(path: &Path) -> Result<LodAsset> {
    if path.is_dir() {
        let manifest = std::fs::read(path.join(MANIFEST_FILE))?;
        let levels = std::fs::read(path.join(LEVELS_FILE))?;
        let chunks = std::fs::read(path.join(CHUNKS_FILE))?;
        decode_asset(&manifest, &levels, &chunks)
    } else {
        parse_container(&std::fs::read(path)?)
    }
}

pub fn parse_container(bytes: &[u8]) -> Result<LodAsset> {
    if bytes.len() < HEADER_LEN {
        return Err(asset_err(format!("container truncated: {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..8] != CONTAINER_MAGIC {
        return Err(asset_err("not an asset container (bad magic)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    if version != FORMAT_VERSION {
        return Err(asset_err(format!("unsupported container version {version}, expected {FORMAT_VERSION}")));
    }
    if u32_at(12) != SECTION_COUNT {
        return Err(asset_err(format!("expected {SECTION_COUNT} sections, header says {}", u32_at(12))));
    }
    let mut slices = Vec::with_capacity(SECTION_COUNT as usize);
    let mut expected = HEADER_LEN as u64;
    for s in 0..SECTION_COUNT as usize {
        let base = 16 + s * 48;
        let (offset, length) = (u64_at(base), u64_at(base + 8));
        if offset != expected {
            return Err(asset_err(format!("section {s} at offset {offset}, expected {expected}")));
        }
        let end = offset
            .checked_add(length)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| asset_err(format!("section {s} runs past end of file")))?;
        let data = &bytes[offset as usize..end as usize];
        if Sha256::digest(data).as_slice() != &bytes[base + 16..base + 48] {
            return Err(asset_err(format!("section {s} checksum mismatch")));
        }
        slices.push(data);
        expected = end;
    }
    if expected != bytes.len() as u64 {
        return Err(asset_err(format!("{} trailing bytes after last section", bytes.len() as u64 - expected)));
    }
    decode_asset(slices[0], slices[1], slices[2])
}

fn check_range(r: &BlobRange, section: &[u8], what: &str) -> Result<std::ops::Range<usize>> {
    let end = r
        .offset
        .checked_add(r.length)
        .filter(|&e| e <= section.len() as u64)
        .ok_or_else(|| asset_err(format!("{what}: range {}+{} outside section of {} bytes", r.offset, r.length, section.len())))?;
    Ok(r.offset as usize..end as usize)
}

fn check_disjoint(mut ranges: Vec<(std::ops::Range<usize>, String)>) -> Result<()> {
    ranges.sort_by_key(|r| (r.0.start, r.0.end));
    for w in ranges.windows(2) {
        if w[1].0.start < w[0].0.end {
            return Err(asset_err(format!("blob ranges overlap: {} and {}", w[0].1, w[1].1)));
        }
    }
    Ok(())
}

fn read_f32(b: &[u8], i: usize) -> f64 {
    f32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap()) as f64
}

fn read_u32s(b: &[u8]) -> Vec<u32> {
    b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn decode_asset(manifest_bytes: &[u8], levels_bin: &[u8], chunks_bin: &[u8]) -> Result<LodAsset> {
    let m: AssetManifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| asset_err(format!("manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(asset_err(format!(
            "unsupported format_version {}, expected {FORMAT_VERSION}",
            m.format_version
        )));
    }
    if m.sh_degree > 3 {
        return Err(asset_err(format!("sh_degree {} out of range", m.sh_degree)));
    }
    let rf = record_floats(m.sh_degree);
    if m.record_floats != rf {
        return Err(asset_err(format!("record_floats {} does not match sh_degree {}", m.record_floats, m.sh_degree)));
    }
    for (name, info, data) in [("levels", &m.sections.levels, levels_bin), ("chunks", &m.sections.chunks, chunks_bin)] {
        if info.length != data.len() as u64 {
            return Err(asset_err(format!("{name} section is {} bytes, manifest says {}", data.len(), info.length)));
        }
        if sha256_hex(data) != info.sha256 {
            return Err(asset_err(format!("{name} section checksum mismatch")));
        }
    }
    if m.levels.is_empty() {
        return Err(asset_err("manifest has no levels"));
    }
    if m.chunks.is_empty() {
        return Err(asset_err("manifest has no chunks"));
    }

    let mut ranges = Vec::new();
    let mut levels = Vec::with_capacity(m.levels.len());
    for (l, d) in m.levels.iter().enumerate() {
        if d.level != l {
            return Err(asset_err(format!("level descriptor {l} labelled {}", d.level)));
        }
        let expected_threshold_ok = if l == 0 {
            d.depth_threshold == 0.0
        } else {
            d.depth_threshold.is_finite() && d.depth_threshold > m.levels[l - 1].depth_threshold
        };
        if !expected_threshold_ok {
            return Err(asset_err(format!("level {l}: depth threshold {} out of order", d.depth_threshold)));
        }
        let n = usize::try_from(d.gaussian_count).map_err(|_| asset_err(format!("level {l}: count too large")))?;
        let need = n.checked_mul(rf * 4).ok_or_else(|| asset_err(format!("level {l}: count too large")))?;
        if d.gaussians.length != need as u64 {
            return Err(asset_err(format!(
                "level {l}: {n} gaussians need {need} bytes, blob has {}",
                d.gaussians.length
            )));
        }
        if d.provenance.length != 4 * n as u64 {
            return Err(asset_err(format!("level {l}: provenance blob length disagrees with count {n}")));
        }
        let gr = check_range(&d.gaussians, levels_bin, &format!("level {l} gaussians"))?;
        let pr = check_range(&d.provenance, levels_bin, &format!("level {l} provenance"))?;
        let blob = &levels_bin[gr.clone()];
        ranges.push((gr, format!("level {l} gaussians")));
        ranges.push((pr.clone(), format!("level {l} provenance")));

        let mut gaussians = Vec::with_capacity(n);
        for i in 0..n {
            let rec = &blob[i * rf * 4..(i + 1) * rf * 4];
            let v: Vec<f64> = (0..rf).map(|k| read_f32(rec, k)).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(asset_err(format!("level {l} gaussian {i}: non-finite value")));
            }
            gaussians.push(Gaussian {
                mean: Vector3::new(v[0], v[1], v[2]),
                scale: Vector3::new(v[3], v[4], v[5]),
                rotation: Quaternion::new(v[6], v[7], v[8], v[9]),
                opacity: v[10],
                filter_variance: v[11],
                sh_coeffs: v[12..].to_vec(),
            });
        }
        let provenance = read_u32s(&levels_bin[pr]);
        levels.push(LodLevel { level: l, depth_threshold: d.depth_threshold, gaussians, provenance });
    }
    let base_len = levels[0].len();
    for level in &levels {
        if let Some(p) = level.provenance.iter().find(|&&p| p as usize >= base_len) {
            return Err(asset_err(format!("level {}: provenance {p} out of range", level.level)));
        }
    }
    check_disjoint(ranges)?;

    let mut ranges = Vec::new();
    let mut centers = Vec::with_capacity(m.chunks.len());
    let mut radii = Vec::with_capacity(m.chunks.len());
    let mut active_sets = Vec::with_capacity(m.chunks.len());
    for (j, c) in m.chunks.iter().enumerate() {
        if c.id != j {
            return Err(asset_err(format!("chunk descriptor {j} labelled {}", c.id)));
        }
        if c.index_sets.len() != levels.len() {
            return Err(asset_err(format!(
                "chunk {j}: {} index sets for {} levels",
                c.index_sets.len(),
                levels.len()
            )));
        }
        if !c.center.iter().all(|v| v.is_finite()) || !(c.radius.is_finite() && c.radius >= 0.0) {
            return Err(asset_err(format!("chunk {j}: non-finite center or invalid radius")));
        }
        let mut sets = Vec::with_capacity(levels.len());
        for (l, r) in c.index_sets.iter().enumerate() {
            if r.length % 4 != 0 {
                return Err(asset_err(format!("chunk {j} level {l}: index blob length not a multiple of 4")));
            }
            let what = format!("chunk {j} level {l}");
            let range = check_range(r, chunks_bin, &what)?;
            let set = read_u32s(&chunks_bin[range.clone()]);
            check_index_set(&set, levels[l].len()).map_err(|e| asset_err(format!("{what}: {e}")))?;
            ranges.push((range, what));
            sets.push(set);
        }
        centers.push(Vector3::new(c.center[0] as f64, c.center[1] as f64, c.center[2] as f64));
        radii.push(c.radius as f64);
        active_sets.push(sets);
    }
    check_disjoint(ranges)?;
    if let Some(a) = m.camera_assignment.iter().find(|&&a| a >= m.chunks.len()) {
        return Err(asset_err(format!("camera assignment to missing chunk {a}")));
    }
    for (j, c) in m.chunks.iter().enumerate() {
        let count = m.camera_assignment.iter().filter(|&&a| a == j).count() as u64;
        if count != c.camera_count {
            return Err(asset_err(format!("chunk {j}: camera_count {} but {count} cameras assigned", c.camera_count)));
        }
    }
    let plan = ChunkPlan { centers, radii, active_sets, source_camera_assignment: m.camera_assignment.clone() };
    Ok(LodAsset { manifest: m, levels, plan })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (Vec<LodLevel>, ChunkPlan, AssetParams) {
        let g = |x: f64| Gaussian::isotropic(Vector3::new(x, 0.0, 5.0), 0.5, 0.8, [0.2, 0.4, 0.6]);
        let l0 = LodLevel { level: 0, depth_threshold: 0.0, gaussians: vec![g(0.0), g(1.0), g(2.0)], provenance: vec![0, 1, 2] };
        let mut g1 = g(0.5);
        g1.filter_variance = 0.25;
        let l1 = LodLevel { level: 1, depth_threshold: 10.0, gaussians: vec![g1], provenance: vec![1] };
        let plan = ChunkPlan {
            centers: vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(10.0, 0.0, 0.0)],
            radii: vec![10.0, 10.0],
            active_sets: vec![vec![vec![0, 2], vec![]], vec![vec![1], vec![0]]],
            source_camera_assignment: vec![0, 1, 1],
        };
        let cam = Camera::look_at(Vector3::zeros(), Vector3::z(), -Vector3::y(), 50.0, 32, 32);
        let params = AssetParams {
            sh_degree: 0,
            reference_focal: 50.0,
            filter_scale: 0.02,
            gamma: 0.02,
            render_camera: RenderIntrinsics::from_camera(&cam),
            build: BuildMetadata {
                tool_version: "test".into(),
                kmeans_seed: 1,
                perturb_seed: 2,
                config_hash: "00".into(),
                thresholds_searched: false,
            },
        };
        (vec![l0, l1], plan, params)
    }

    #[test]
    fn round_trip_and_empty_set() {
        let (levels, plan, params) = tiny();
        let enc = encode_asset(&levels, &plan, &params).unwrap();
        assert_eq!(enc.manifest.chunks[0].index_sets[1].length, 0);
        let dec = decode_asset(&enc.manifest_bytes, &enc.levels_bin, &enc.chunks_bin).unwrap();
        assert_eq!(dec.plan, plan);
        assert_eq!(dec.levels[1].gaussians[0].filter_variance, 0.25);
        let cont = parse_container(&container_bytes(&enc)).unwrap();
        assert_eq!(cont, dec);
    }

    #[test]
    fn rejects_overlap_version_and_unsorted() {
        let (levels, plan, params) = tiny();
        let enc = encode_asset(&levels, &plan, &params).unwrap();

        let mut m = enc.manifest.clone();
        m.chunks[1].index_sets[0] = m.chunks[0].index_sets[0];
        let bytes = serde_json::to_vec(&m).unwrap();
        let e = decode_asset(&bytes, &enc.levels_bin, &enc.chunks_bin).unwrap_err().to_string();
        assert!(e.contains("overlap"), "{e}");

        let mut m = enc.manifest.clone();
        m.format_version = 2;
        let bytes = serde_json::to_vec(&m).unwrap();
        let e = decode_asset(&bytes, &enc.levels_bin, &enc.chunks_bin).unwrap_err().to_string();
        assert!(e.contains("format_version"), "{e}");

        let mut unsorted = plan.clone();
        unsorted.active_sets[0][0] = vec![2, 0];
        let mut chunks = enc.chunks_bin.clone();
        chunks[..8].copy_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]);
        let mut m = enc.manifest.clone();
        m.sections.chunks.sha256 = sha256_hex(&chunks);
        let bytes = serde_json::to_vec(&m).unwrap();
        let e = decode_asset(&bytes, &enc.levels_bin, &chunks).unwrap_err().to_string();
        assert!(e.contains("strictly increasing"), "{e}");

        let e = decode_asset(&enc.manifest_bytes, &enc.levels_bin[..enc.levels_bin.len() - 4], &enc.chunks_bin)
            .unwrap_err()
            .to_string();
        assert!(e.contains("levels section"), "{e}");
    }

    #[test]
    fn encoding_is_deterministic() {
        let (levels, plan, params) = tiny();
        let a = container_bytes(&encode_asset(&levels, &plan, &params).unwrap());
        let b = container_bytes(&encode_asset(&levels, &plan, &params).unwrap());
        assert_eq!(sha256_hex(&a), sha256_hex(&b));
    }
}
