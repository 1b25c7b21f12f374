//! Guidance extraction: runs the pixel, sketch and region extractors on a pair
//! of keyframes and assembles the network's input bundle.

use std::path::Path;

use crate::error::{ensure_contract, Result};
use crate::frames_io::Raster;
use crate::imgproc::Plane;
use crate::pixel_flow::{estimate_flow, split_time, warp, FlowField, FlowParams};
use crate::region_corr::{
    aggregate_region_flow, match_regions, refine_keyframes_regional, save_region_overlay, trapped_ball_segment, RegionMap,
    RegionPair, DEFAULT_ACCEPT, DEFAULT_RADII,
};
use crate::sketch_corr::{rasterize_traces, save_match_overlay, ClassicalMatcher, Keypoint, MatchPair, SketchMatcher};
use crate::u_transformer::GuidanceBundle;

/// Names of the files written by [`Guidance::dump`].
pub const DUMP_IMAGES: [&str; 5] = ["pixel0.png", "pixel1.png", "trace.png", "region0.png", "region1.png"];
pub const DUMP_FLOWS: [&str; 2] = ["flow_t0.flo", "flow_t1.flo"];

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub flow: FlowParams,
    pub matcher: ClassicalMatcher,
    pub radii: Vec<usize>,
    pub accept: f64,
    /// Timestamps of the point-trace rasters.
    pub trace_times: Vec<f64>,
    /// Target time of the synthesised frame.
    pub target_time: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            flow: FlowParams::default(),
            matcher: ClassicalMatcher::default(),
            radii: DEFAULT_RADII.to_vec(),
            accept: DEFAULT_ACCEPT,
            trace_times: vec![0.5],
            target_time: 0.5,
        }
    }
}

/// Everything the extractors produced, including intermediate results for inspection.
#[derive(Clone, Debug)]
pub struct Guidance {
    pub bundle: GuidanceBundle,
    /// `(O_{t→0}, O_{t→1})` from pixel flow.
    pub pixel_flows: (FlowField, FlowField),
    /// `(F_{t→0}, F_{t→1})` from region matching.
    pub region_flows: (FlowField, FlowField),
    pub keypoints: (Vec<Keypoint>, Vec<Keypoint>),
    pub matches: Vec<MatchPair>,
    pub regions: (RegionMap, RegionMap),
    pub region_pairs: Vec<RegionPair>,
}

pub fn extract_guidance(i0: &Raster, i1: &Raster, cfg: &GuidanceConfig) -> Result<Guidance> {
    ensure_contract!(
        i0.channels() == 1 && i1.channels() == 1,
        "keyframes must be single-channel sketches"
    );
    ensure_contract!(
        i0.height() == i1.height() && i0.width() == i1.width(),
        "keyframe sizes differ: {}x{} vs {}x{}",
        i0.height(),
        i0.width(),
        i1.height(),
        i1.width()
    );
    let (h, w) = (i0.height(), i0.width());
    let t = cfg.target_time;

    let f01 = estimate_flow(i0, i1, &cfg.flow)?;
    let f10 = estimate_flow(i1, i0, &cfg.flow)?;
    let (o_t0, o_t1) = split_time(&f01, &f10, t)?;
    let pixel = [warp(i0, &o_t0), warp(i1, &o_t1)];

    let ka = cfg.matcher.detect(i0);
    let kb = cfg.matcher.detect(i1);
    let matches = cfg.matcher.correspond(&ka, &kb, h, w)?;
    let trace = rasterize_traces(&matches, &ka, &kb, &cfg.trace_times, h, w)?;

    let ma = trapped_ball_segment(i0, &cfg.radii)?;
    let mb = trapped_ball_segment(i1, &cfg.radii)?;
    let region_pairs = match_regions(&ma, &mb, cfg.accept);
    let (r_t0, r_t1) = aggregate_region_flow(&region_pairs, &ma, &mb, t)?;
    let (r0, r1) = refine_keyframes_regional(i0, i1, &r_t0, &r_t1)?;

    Ok(Guidance {
        bundle: GuidanceBundle {
            pixel,
            trace,
            region: [r0, r1],
        },
        pixel_flows: (o_t0, o_t1),
        region_flows: (r_t0, r_t1),
        keypoints: (ka, kb),
        matches,
        regions: (ma, mb),
        region_pairs,
    })
}

impl Guidance {
    /// Write the five guidance maps (trace layers max-combined) and the two pixel flows.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        let b = &self.bundle;
        let (h, w) = b.dims();
        let mut trace = Plane::filled(h, w, 0.0);
        for l in &b.trace.layers {
            trace.data.iter_mut().zip(&l.data).for_each(|(a, v)| *a = a.max(*v));
        }
        let images = [
            b.pixel[0].clone(),
            b.pixel[1].clone(),
            Raster::from_plane(&trace)?,
            b.region[0].clone(),
            b.region[1].clone(),
        ];
        for (name, img) in DUMP_IMAGES.iter().zip(&images) {
            img.save_png(dir.join(name))?;
        }
        self.pixel_flows.0.save(dir.join(DUMP_FLOWS[0]))?;
        self.pixel_flows.1.save(dir.join(DUMP_FLOWS[1]))?;
        Ok(())
    }

    /// Match-line and region-label debug images.
    pub fn dump_overlays(&self, dir: &Path, i0: &Raster, i1: &Raster, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        save_match_overlay(dir.join("matches.png"), i0, i1, &self.keypoints.0, &self.keypoints.1, &self.matches)?;
        save_region_overlay(dir.join("regions0.png"), &self.regions.0, seed)?;
        save_region_overlay(dir.join("regions1.png"), &self.regions.1, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_pair_gives_trivial_guidance() {
        let white = Raster::filled(32, 32, 1, 1.0).unwrap();
        let g = extract_guidance(&white, &white, &GuidanceConfig::default()).unwrap();
        assert!(g.pixel_flows.0.is_zero() && g.region_flows.1.is_zero());
        assert!(g.matches.is_empty());
        assert_eq!(g.bundle.trace.mass(), 0.0);
        assert_eq!(g.bundle.pixel[0], white);
        assert_eq!(g.bundle.region[1], white);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let a = Raster::filled(32, 32, 1, 1.0).unwrap();
        let b = Raster::filled(32, 40, 1, 1.0).unwrap();
        assert!(extract_guidance(&a, &b, &GuidanceConfig::default()).is_err());
    }

    #[test]
    fn dump_writes_seven_files() {
        let white = Raster::filled(16, 16, 1, 1.0).unwrap();
        let g = extract_guidance(&white, &white, &GuidanceConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        g.dump(dir.path()).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 7);
    }
}
