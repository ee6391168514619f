// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic scenes: a generated scenario advanced by the teacher, and a
//! flat-colored RGB rendering of its concept grid for the encoder.

use std::path::Path;

use conceptdrive_core::rng::fnv1a;
use conceptdrive_core::sim::{render_concept_grid, start_state, step, teacher_control, EgoState, Scenario, SimConfig};
use conceptdrive_core::vit::Image;
use conceptdrive_core::experiment::Harness;

use crate::error::{format_err, Error, Result};

/// `scene:<index>` or `scene:<index>:<step>`: scenario `index` of the
/// configured family, `step` teacher steps after the start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneId {
    pub index: u64,
    pub step: usize,
}

impl SceneId {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid scene id '{s}' (expected scene:<index>[:<step>])"));
        let rest = s.strip_prefix("scene:").ok_or_else(bad)?;
        let mut parts = rest.split(':');
        let index = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let step = match parts.next() {
            Some(p) => p.parse().map_err(|_| bad())?,
            None => 0,
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self { index, step })
    }
}

/// The scenario and the ego state `step` teacher steps in.
pub fn scene_state(h: &Harness, seed: u64, id: SceneId) -> Result<(Scenario, EgoState)> {
    let scenario = h.family.generate(seed, id.index);
    let state = advance(&scenario, &h.sim, id.step)?;
    Ok((scenario, state))
}

fn advance(scenario: &Scenario, sim: &SimConfig, steps: usize) -> Result<EgoState> {
    let mut state = start_state(scenario, sim);
    for t in 0..steps {
        let (u, _) = teacher_control(&state, scenario, sim);
        state = step(&state, &u, sim.dt, &scenario.lane)?;
        if let Some(kind) = conceptdrive_core::sim::check_failure(&state, scenario, sim.max_heading) {
            return Err(Error::Config(format!("the teacher fails ({}) at step {t}, before step {steps}", kind.name())));
        }
    }
    Ok(state)
}

/// A stable color for a concept name.
pub fn concept_color(name: &str) -> [f32; 3] {
    let h = fnv1a(name.as_bytes());
    let channel = |shift: u32| 0.1 + 0.8 * ((h >> shift) & 0xFF) as f32 / 255.0;
    [channel(0), channel(8), channel(16)]
}

/// One `patch × patch` block of flat color per concept-grid cell.
pub fn render_image(scenario: &Scenario, state: &EgoState, sim: &SimConfig, patch: usize) -> Result<Image> {
    let grid = render_concept_grid(state, scenario, &sim.view)?;
    let names = grid.names(scenario);
    let (h, w) = (grid.rows * patch, grid.cols * patch);
    let mut data = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let c = concept_color(names[(y / patch) * grid.cols + x / patch]);
            data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    Ok(Image::new(h, w, data)?)
}

/// Reads an image file as RGB in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| format_err!("{}: {e}", path.display()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
    Ok(Image::new(h as usize, w as usize, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_ids() {
        assert_eq!(SceneId::parse("scene:4").unwrap(), SceneId { index: 4, step: 0 });
        assert_eq!(SceneId::parse("scene:4:20").unwrap(), SceneId { index: 4, step: 20 });
        for bad in ["4", "scene:", "scene:x", "scene:1:2:3"] {
            assert!(SceneId::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let raw: Vec<u8> = (0..4 * 2 * 3).map(|i| (i * 10) as u8).collect();
        image::RgbImage::from_raw(4, 2, raw.clone()).unwrap().save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.height(), img.width()), (2, 4));
        assert_eq!(img.pixel(1, 3, 2), f32::from(raw[(4 + 3) * 3 + 2]) / 255.0);
    }
}
