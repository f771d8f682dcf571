//! Toy cooperative scenes: boxes on a square ground plane observed by an ego
//! vehicle and `K` connected vehicles with limited sensing range.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use v2v_nn::Tensor;

use super::geometry::{Anchor, Box3};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// side of the square world in meters
    pub world_size: f64,
    /// raster cells per side
    pub raster_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_cavs: usize,
    pub max_cavs: usize,
    /// meters
    pub sensing_radius: f64,
    /// probability that an agent misses an object inside its range
    pub dropout: f64,
    /// minimum distance between object centers
    pub min_separation: f64,
    pub width_range: (f64, f64),
    pub length_range: (f64, f64),
    pub height_range: (f64, f64),
    /// headings are uniform in `[-max_heading, max_heading]`
    pub max_heading: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            world_size: 64.0,
            raster_size: 64,
            min_objects: 2,
            max_objects: 8,
            min_cavs: 1,
            max_cavs: 4,
            sensing_radius: 40.0,
            dropout: 0.1,
            min_separation: 6.0,
            width_range: (1.8, 2.6),
            length_range: (3.8, 5.2),
            height_range: (1.4, 1.9),
            max_heading: std::f64::consts::FRAC_PI_8,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if !(self.world_size > 0.0) || self.raster_size == 0 {
            return bad("world and raster sizes must be positive");
        }
        if !(self.sensing_radius > 0.0) {
            return bad("sensing radius must be positive");
        }
        if self.min_cavs == 0 || self.min_cavs > self.max_cavs {
            return bad("need 1 <= min_cavs <= max_cavs");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        for (lo, hi) in [self.width_range, self.length_range, self.height_range] {
            if !(lo > 0.0 && hi >= lo) {
                return bad("size ranges must be positive and ordered");
            }
        }
        if !(self.max_heading >= 0.0 && self.max_heading < std::f64::consts::FRAC_PI_2) {
            return bad("max_heading must lie in [0, pi/2)");
        }
        if self.min_separation < 0.0 {
            return bad("min_separation must be nonnegative");
        }
        Ok(())
    }

    /// Expected object size, used for the anchors.
    pub fn mean_size(&self) -> (f64, f64, f64) {
        let mid = |r: (f64, f64)| (r.0 + r.1) / 2.0;
        (mid(self.width_range), mid(self.length_range), mid(self.height_range))
    }

    /// One anchor per cell of a `grid x grid` head, row-major (row = y).
    pub fn anchors(&self, grid: usize) -> Vec<Anchor> {
        let (w, l, h) = self.mean_size();
        let cell = self.world_size / grid as f64;
        let mut out = Vec::with_capacity(grid * grid);
        for r in 0..grid {
            for c in 0..grid {
                out.push(Anchor {
                    bbox: Box3 {
                        x: (c as f64 + 0.5) * cell,
                        y: (r as f64 + 0.5) * cell,
                        z: h / 2.0,
                        w,
                        l,
                        h,
                        theta: 0.0,
                    },
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub x: f64,
    pub y: f64,
    /// indices into [`Scene::objects`] this agent observes
    pub visible: Vec<usize>,
}

/// Index 0 of `agents` is the ego vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub world_size: f64,
    pub raster_size: usize,
    pub objects: Vec<Box3>,
    pub agents: Vec<Agent>,
}

const MAX_PLACEMENT_TRIES: usize = 1000;

/// Draws a scene from `seed`. Every object is observed by at least one agent.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = cfg.world_size;
    let k = rng.gen_range(cfg.min_cavs..=cfg.max_cavs);
    let mut agents: Vec<Agent> = (0..=k)
        .map(|_| Agent {
            x: rng.gen_range(0.0..world),
            y: rng.gen_range(0.0..world),
            visible: Vec::new(),
        })
        .collect();
    let r2 = cfg.sensing_radius * cfg.sensing_radius;
    let in_range = |a: &Agent, x: f64, y: f64| (a.x - x).powi(2) + (a.y - y).powi(2) <= r2;

    let target = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let margin = cfg.length_range.1 / 2.0;
    let mut objects: Vec<Box3> = Vec::with_capacity(target);
    let mut tries = 0;
    while objects.len() < target && tries < MAX_PLACEMENT_TRIES * target {
        tries += 1;
        let x = rng.gen_range(margin..world - margin);
        let y = rng.gen_range(margin..world - margin);
        if !agents.iter().any(|a| in_range(a, x, y)) {
            continue;
        }
        if objects
            .iter()
            .any(|o| (o.x - x).hypot(o.y - y) < cfg.min_separation)
        {
            continue;
        }
        let h = rng.gen_range(cfg.height_range.0..=cfg.height_range.1);
        objects.push(Box3 {
            x,
            y,
            z: h / 2.0,
            w: rng.gen_range(cfg.width_range.0..=cfg.width_range.1),
            l: rng.gen_range(cfg.length_range.0..=cfg.length_range.1),
            h,
            theta: rng.gen_range(-cfg.max_heading..=cfg.max_heading),
        });
    }
    if objects.is_empty() {
        return Err(CoreError::Config("could not place any object".into()));
    }

    for (i, o) in objects.iter().enumerate() {
        let mut seen = false;
        for a in agents.iter_mut() {
            if in_range(a, o.x, o.y) && !rng.gen_bool(cfg.dropout) {
                a.visible.push(i);
                seen = true;
            }
        }
        if !seen {
            let nearest = agents
                .iter()
                .enumerate()
                .filter(|(_, a)| in_range(a, o.x, o.y))
                .min_by(|(_, a), (_, b)| {
                    let da = (a.x - o.x).hypot(a.y - o.y);
                    let db = (b.x - o.x).hypot(b.y - o.y);
                    da.total_cmp(&db)
                })
                .map(|(j, _)| j)
                .unwrap_or(0);
            agents[nearest].visible.push(i);
        }
    }
    for a in agents.iter_mut() {
        a.visible.sort_unstable();
    }
    Ok(Scene {
        seed,
        world_size: world,
        raster_size: cfg.raster_size,
        objects,
        agents,
    })
}

const SUPERSAMPLE: usize = 4;

impl Scene {
    pub fn num_cavs(&self) -> usize {
        self.agents.len() - 1
    }

    /// Fraction of objects the ego vehicle does not observe.
    pub fn ego_missed_fraction(&self) -> f64 {
        let seen = self.agents[0].visible.len();
        1.0 - seen as f64 / self.objects.len() as f64
    }

    /// Occupancy raster `[1, R, R]` of the objects agent `agent` observes,
    /// each cell holding the covered fraction of its area (clipped to 1).
    pub fn raster(&self, agent: usize) -> Result<Tensor> {
        let a = self
            .agents
            .get(agent)
            .ok_or_else(|| CoreError::Config(format!("agent {agent} not in scene")))?;
        let n = self.raster_size;
        let cell = self.world_size / n as f64;
        let sub = cell / SUPERSAMPLE as f64;
        let mut data = vec![0.0; n * n];
        for &i in &a.visible {
            let b = &self.objects[i];
            let reach = b.w.hypot(b.l) / 2.0;
            let c0 = (((b.x - reach) / cell).floor().max(0.0)) as usize;
            let c1 = (((b.x + reach) / cell).ceil() as usize).min(n);
            let r0 = (((b.y - reach) / cell).floor().max(0.0)) as usize;
            let r1 = (((b.y + reach) / cell).ceil() as usize).min(n);
            for r in r0..r1 {
                for c in c0..c1 {
                    let mut hits = 0;
                    for sr in 0..SUPERSAMPLE {
                        for sc in 0..SUPERSAMPLE {
                            let px = c as f64 * cell + (sc as f64 + 0.5) * sub;
                            let py = r as f64 * cell + (sr as f64 + 0.5) * sub;
                            if b.contains_bev(px, py) {
                                hits += 1;
                            }
                        }
                    }
                    let v = &mut data[r * n + c];
                    *v = (*v + hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64).min(1.0);
                }
            }
        }
        Ok(Tensor::new(&[1, n, n], data)?)
    }

    /// Rasters of every agent stacked as `[A, 1, R, R]`, ego first.
    pub fn rasters(&self) -> Result<Tensor> {
        let views = (0..self.agents.len())
            .map(|i| self.raster(i))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = views.iter().collect();
        Ok(Tensor::stack(&refs)?)
    }
}

/// One scene per line.
pub fn write_scenes<W: Write>(out: &mut W, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut *out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_scenes<R: BufRead>(input: R) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line)
            .map_err(|e| CoreError::Fixture(format!("line {}: {e}", i + 1)))?;
        if scene.agents.len() < 2 || scene.objects.is_empty() {
            return Err(CoreError::Fixture(format!(
                "line {}: a scene needs an ego, at least one CAV and one object",
                i + 1
            )));
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_visibility_without_dropout() {
        let cfg = SceneConfig {
            dropout: 0.0,
            sensing_radius: 100.0,
            ..Default::default()
        };
        for seed in 0..20 {
            let s = generate_scene(&cfg, seed).unwrap();
            for a in &s.agents {
                assert_eq!(a.visible.len(), s.objects.len());
            }
        }
    }

    #[test]
    fn zero_cavs_and_zero_radius_are_rejected() {
        let cfg = SceneConfig { min_cavs: 0, ..Default::default() };
        assert!(generate_scene(&cfg, 1).is_err());
        let cfg = SceneConfig { sensing_radius: 0.0, ..Default::default() };
        assert!(generate_scene(&cfg, 1).is_err());
    }

    #[test]
    fn every_object_is_seen_and_inside_the_world() {
        let cfg = SceneConfig::default();
        for seed in 0..200 {
            let s = generate_scene(&cfg, seed).unwrap();
            assert!((1..=4).contains(&s.num_cavs()));
            for (i, o) in s.objects.iter().enumerate() {
                assert!(s.agents.iter().any(|a| a.visible.contains(&i)));
                assert!(o.x > 0.0 && o.x < 64.0 && o.y > 0.0 && o.y < 64.0);
                assert!(o.theta >= -std::f64::consts::FRAC_PI_2 && o.theta < std::f64::consts::FRAC_PI_2);
            }
        }
    }

    #[test]
    fn raster_covers_the_footprint() {
        let cfg = SceneConfig::default();
        let s = generate_scene(&cfg, 7).unwrap();
        let all: usize = s.agents[0].visible.len();
        let r = s.raster(0).unwrap();
        assert_eq!(r.shape(), &[1, 64, 64]);
        assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let area: f64 = s.agents[0].visible.iter().map(|&i| s.objects[i].w * s.objects[i].l).sum();
        // 1 m cells: raster mass approximates total footprint area
        assert!((r.sum() - area).abs() < 0.15 * area.max(1.0) + 1.0, "{} vs {area} ({all} objects)", r.sum());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 42).unwrap());
        assert_ne!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 43).unwrap());
    }

    #[test]
    fn fixture_round_trip() {
        let cfg = SceneConfig::default();
        let scenes: Vec<Scene> = (0..5).map(|s| generate_scene(&cfg, s).unwrap()).collect();
        let mut buf = Vec::new();
        write_scenes(&mut buf, &scenes).unwrap();
        let back = read_scenes(&buf[..]).unwrap();
        assert_eq!(back, scenes);
        assert!(read_scenes(&b"{not json}\n"[..]).is_err());
    }

    #[test]
    fn anchors_tile_the_head_grid() {
        let cfg = SceneConfig::default();
        let a = cfg.anchors(16);
        assert_eq!(a.len(), 256);
        assert_eq!((a[0].bbox.x, a[0].bbox.y), (2.0, 2.0));
        assert_eq!((a[17].bbox.x, a[17].bbox.y), (6.0, 6.0));
        assert!(a.iter().all(|x| x.diagonal() > 0.0 && x.bbox.theta == 0.0));
    }
}
