//! Clip manifests and run configuration files (TOML).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bridge::Transport;
use crate::error::{Error, Result};
use crate::fusion::{Correspondences, FusionConfig, PairTable};
use crate::io::{compose_flows, load_flow, load_frames, load_mask};
use crate::poisson::SolverConfig;
use crate::raster::{FlowField, Frame, OcclusionMask};
use crate::sampler::{SamplerConfig, ScheduleConfig, ToyConfig};
use crate::scalar::Scalar;
use crate::warp::{occlusion_mask_dilated, DEFAULT_OCCLUSION_TOLERANCE_PX};

fn parse_toml<D: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<D> {
    toml::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: e.span().map_or(0, |s| s.start as u64),
        message: e.message().trim().to_string(),
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowMode {
    /// A flow file is given for every ordered pair.
    #[default]
    AllPairs,
    /// Only `k <-> k+1` flows are given; the rest are composed.
    Consecutive,
}

/// A flow file in Middlebury orientation: it lives on frame `from`'s grid
/// and points into frame `to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowEntry {
    pub from: usize,
    pub to: usize,
    pub path: PathBuf,
}

/// Extra occlusion marks for pixels of frame `from` with respect to `to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskEntry {
    pub from: usize,
    pub to: usize,
    pub path: PathBuf,
}

/// Ordered frame list with optional flows and masks. Relative paths resolve
/// against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub frames: Vec<PathBuf>,
    #[serde(default)]
    pub flow_mode: FlowMode,
    #[serde(default)]
    pub flows: Vec<FlowEntry>,
    #[serde(default)]
    pub masks: Vec<MaskEntry>,
    /// Optional `[width, height]` every frame must match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[usize; 2]>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ClipManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: ClipManifest = parse_toml(&read_text(path)?, path)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if m.frames.is_empty() {
            return Err(Error::file(path, "manifest lists no frames"));
        }
        let n = m.frames.len();
        for (what, from, to) in m
            .flows
            .iter()
            .map(|f| ("flow", f.from, f.to))
            .chain(m.masks.iter().map(|f| ("mask", f.from, f.to)))
        {
            if from >= n || to >= n || from == to {
                return Err(Error::file(
                    path,
                    format!("{what} entry {from}->{to} is not a pair of distinct frames among {n}"),
                ));
            }
        }
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn frame_paths(&self) -> Vec<PathBuf> {
        self.frames.iter().map(|p| self.resolve(p)).collect()
    }

    pub fn has_flows(&self) -> bool {
        !self.flows.is_empty()
    }

    pub fn load_frames<T: Scalar>(&self) -> Result<Vec<Frame<T>>> {
        let paths = self.frame_paths();
        let frames = load_frames::<T>(&paths)?;
        if let Some([w, h]) = self.size {
            let f = &frames[0];
            if (f.width(), f.height()) != (w, h) {
                return Err(Error::file(
                    &paths[0],
                    format!(
                        "size {}x{} differs from the manifest's {w}x{h}",
                        f.width(),
                        f.height()
                    ),
                ));
            }
        }
        Ok(frames)
    }

    /// Loads flows into the engine's pair table, composing consecutive flows
    /// when asked. Occlusions combine the forward-backward check, unknown
    /// `.flo` vectors, off-image compositions and any listed masks.
    pub fn load_correspondences<T: Scalar>(
        &self,
        width: usize,
        height: usize,
        warp: &WarpConfig,
    ) -> Result<Correspondences<T>> {
        let n = self.frames.len();
        // Middlebury orientation: mw[from][to].
        let mut mw: Vec<Vec<Option<(FlowField<T>, OcclusionMask)>>> =
            (0..n).map(|_| (0..n).map(|_| None).collect()).collect();
        for e in &self.flows {
            let path = self.resolve(&e.path);
            let (flow, unknown) = load_flow::<T>(&path)?;
            if (flow.width(), flow.height()) != (width, height) {
                return Err(Error::file(
                    &path,
                    format!(
                        "flow is {}x{}, frames are {width}x{height}",
                        flow.width(),
                        flow.height()
                    ),
                ));
            }
            mw[e.from][e.to] = Some((flow, unknown));
        }
        if self.flow_mode == FlowMode::Consecutive {
            for k in 0..n.saturating_sub(1) {
                for (a, b) in [(k, k + 1), (k + 1, k)] {
                    if mw[a][b].is_none() {
                        return Err(Error::MissingPair {
                            table: "consecutive flows",
                            source_index: a,
                            target_index: b,
                        });
                    }
                }
            }
            for span in 2..n {
                for a in 0..n - span {
                    let b = a + span;
                    for (from, mid, to) in [(a, b - 1, b), (b, a + 1, a)] {
                        let (f1, m1) = mw[from][mid].as_ref().unwrap();
                        let (f2, _) = mw[mid][to].as_ref().unwrap();
                        let (f, off) = compose_flows(f1, f2)?;
                        mw[from][to] = Some((f, off.union(m1)?));
                    }
                }
            }
        }
        let tol = T::lit(warp.occlusion_tolerance_px);
        // Engine table entry (j, i) lives on i's grid and points into j.
        let flows = PairTable::try_from_fn(n, "flows", |j, i| {
            mw[i][j]
                .as_ref()
                .map(|(f, _)| f.clone())
                .ok_or(Error::MissingPair {
                    table: "flows",
                    source_index: i,
                    target_index: j,
                })
        })?;
        let mut occlusions = PairTable::try_from_fn(n, "occlusions", |j, i| {
            let mut m = occlusion_mask_dilated(
                flows.get(j, i)?,
                flows.get(i, j)?,
                tol,
                warp.dilation_radius,
            )?;
            m = m.union(&mw[i][j].as_ref().unwrap().1)?;
            Ok(m)
        })?;
        for e in &self.masks {
            let path = self.resolve(&e.path);
            let mask = load_mask(&path)?;
            if (mask.width(), mask.height()) != (width, height) {
                return Err(Error::file(&path, "mask size differs from the frames"));
            }
            let merged = occlusions.get(e.to, e.from)?.union(&mask)?;
            occlusions.insert(e.to, e.from, merged);
        }
        Ok(Correspondences { flows, occlusions })
    }
}

/// Occlusion detection settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpConfig {
    pub occlusion_tolerance_px: f64,
    pub dilation_radius: usize,
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            occlusion_tolerance_px: DEFAULT_OCCLUSION_TOLERANCE_PX,
            dilation_radius: 0,
        }
    }
}

impl WarpConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.occlusion_tolerance_px;
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::config(
                "warp.occlusion_tolerance_px",
                format!("must be finite and >= 0, got {t}"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserKind {
    #[default]
    Toy,
    /// Returns its input; useful for exercising the loop.
    Identity,
    /// A process speaking the bridge protocol.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    /// Toy denoiser pull towards its planted target.
    pub lambda0: f64,
    pub tint_strength: f64,
    /// Program and arguments of an external denoiser.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub command: Vec<String>,
    /// Unix socket of an already running external denoiser.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub socket: Option<PathBuf>,
    pub timeout_secs: f64,
    /// Sent verbatim with every request.
    pub conditioning: String,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        let toy = ToyConfig::default();
        Self {
            kind: DenoiserKind::Toy,
            lambda0: toy.lambda0,
            tint_strength: toy.tint_strength,
            command: Vec::new(),
            socket: None,
            timeout_secs: 300.0,
            conditioning: String::new(),
        }
    }
}

impl DenoiserConfig {
    pub fn toy(&self) -> ToyConfig {
        ToyConfig {
            lambda0: self.lambda0,
            tint_strength: self.tint_strength,
        }
    }

    pub fn transport(&self) -> Result<Transport> {
        match (&self.command[..], &self.socket) {
            ([], Some(p)) => Ok(Transport::Socket(p.clone())),
            ([_, ..], None) => Ok(Transport::Command(self.command.clone())),
            ([], None) => Err(Error::config(
                "denoiser.command",
                "an external denoiser needs `command` or `socket`",
            )),
            _ => Err(Error::config(
                "denoiser.socket",
                "give either `command` or `socket`, not both",
            )),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<()> {
        self.toy().validate()?;
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(Error::config(
                "denoiser.timeout_secs",
                format!("must be finite and > 0, got {}", self.timeout_secs),
            ));
        }
        if self.kind == DenoiserKind::External {
            self.transport()?;
        }
        Ok(())
    }
}

/// Everything `run` needs besides the clip.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Clamp window for denoiser predictions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0_clip: Option<[f64; 2]>,
    /// Also write lossless `.f32` dumps next to the PNGs.
    pub emit_raw: bool,
    pub schedule: ScheduleConfig,
    pub fusion: FusionConfig,
    pub solver: SolverConfig,
    pub warp: WarpConfig,
    pub denoiser: DenoiserConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = parse_toml(&read_text(path)?, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = parse_toml(text, Path::new("<config>"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            seed: self.seed,
            schedule: self.schedule,
            fusion: self.fusion,
            solver: self.solver,
            x0_clip: self.x0_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler().validate()?;
        self.warp.validate()?;
        self.denoiser.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{save_flow, save_frame};

    #[test]
    fn defaults_round_trip_through_toml() {
        let d = RunConfig::default();
        let text = d.to_toml();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), d);
        assert!(text.contains("stage_boundary_fraction = 0.5"));
        assert!(text.contains("steps = 20"));
    }

    #[test]
    fn validation_names_fields() {
        let cases = [
            (
                "[fusion]\nstage_boundary_fraction = 1.5",
                "fusion.stage_boundary_fraction",
            ),
            ("[schedule]\nsteps = 0", "schedule.steps"),
            ("[schedule]\neta = -1.0", "schedule.eta"),
            (
                "[solver]\nresidual_tolerance = 0.0",
                "solver.residual_tolerance",
            ),
            (
                "[warp]\nocclusion_tolerance_px = -1.0",
                "warp.occlusion_tolerance_px",
            ),
            ("[denoiser]\nkind = \"external\"", "denoiser.command"),
            ("[denoiser]\ntimeout_secs = 0.0", "denoiser.timeout_secs"),
            ("x0_clip = [1.0, 0.0]", "x0_clip"),
        ];
        for (text, field) in cases {
            let e = RunConfig::from_toml_str(text).unwrap_err().to_string();
            assert!(e.contains(field), "{text:?} -> {e}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml_str("[fusion]\nstage_boundary = 0.5")
            .unwrap_err()
            .to_string();
        assert!(e.contains("stage_boundary"), "{e}");
    }

    fn write_clip(dir: &Path, n: usize, mode: &str, dx: f32) -> PathBuf {
        let mut text = String::from("frames = [");
        for k in 0..n {
            let f = Frame::<f32>::from_fn(12, 8, 1, |x, y, _| {
                ((x as f32 - k as f32 * dx) * 0.3).sin() * 0.3 + 0.5 + y as f32 * 0.01
            });
            save_frame(&f, &dir.join(format!("f{k}.png"))).unwrap();
            text += &format!("\"f{k}.png\", ");
        }
        text += &format!("]\nflow_mode = \"{mode}\"\n");
        for a in 0..n {
            for b in 0..n {
                let consecutive = a.abs_diff(b) == 1;
                if a == b || (mode == "consecutive" && !consecutive) {
                    continue;
                }
                let flow = FlowField::<f32>::uniform(12, 8, (b as f32 - a as f32) * dx, 0.0);
                save_flow(&flow, &dir.join(format!("{a}_{b}.flo"))).unwrap();
                text += &format!("[[flows]]\nfrom = {a}\nto = {b}\npath = \"{a}_{b}.flo\"\n");
            }
        }
        let p = dir.join("clip.toml");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn consecutive_mode_matches_all_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let c = dir.path().join("c");
        fs::create_dir_all(&a).unwrap();
        fs::create_dir_all(&c).unwrap();
        let ma = ClipManifest::load(&write_clip(&a, 4, "all-pairs", 1.0)).unwrap();
        let mc = ClipManifest::load(&write_clip(&c, 4, "consecutive", 1.0)).unwrap();
        let w = WarpConfig::default();
        let ca = ma.load_correspondences::<f32>(12, 8, &w).unwrap();
        let cc = mc.load_correspondences::<f32>(12, 8, &w).unwrap();
        for j in 0..4 {
            for i in 0..4 {
                if i == j {
                    continue;
                }
                let (fa, fc) = (ca.flows.get(j, i).unwrap(), cc.flows.get(j, i).unwrap());
                for y in 0..8 {
                    for x in 0..12 {
                        let (p, q) = (fa.get(x, y), fc.get(x, y));
                        assert!((p.0 - q.0).abs() < 1e-5 && (p.1 - q.1).abs() < 1e-5);
                        // Entry (j, i) points from i into j.
                        assert_eq!(p.0, j as f32 - i as f32);
                    }
                }
                let (oa, oc) = (
                    ca.occlusions.get(j, i).unwrap(),
                    cc.occlusions.get(j, i).unwrap(),
                );
                assert!(oc.count() >= oa.count());
            }
        }
        assert_eq!(ma.load_frames::<f32>().unwrap().len(), 4);
    }

    #[test]
    fn missing_consecutive_flow_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_clip(dir.path(), 3, "consecutive", 1.0);
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("from = 2\nto = 1", "from = 0\nto = 2");
        fs::write(&p, text).unwrap();
        let m = ClipManifest::load(&p).unwrap();
        let e = m
            .load_correspondences::<f32>(12, 8, &WarpConfig::default())
            .unwrap_err();
        assert!(
            matches!(
                e,
                Error::MissingPair {
                    source_index: 2,
                    target_index: 1,
                    ..
                }
            ),
            "{e}"
        );
    }
}
