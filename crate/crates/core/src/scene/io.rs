//! Dataset files: one JSON header line followed by length-prefixed binary
//! scene records. All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Agent, Behavior, CellClass, Command, Dataset, EgoState, ScenarioKind, Scene, SemanticMap, Waypoint,
    GENERATOR_VERSION, GRID,
};
use crate::config::HORIZON;
use crate::error::{PlannerError, Result};
use crate::geometry::Vec2;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: String,
    seed: u64,
    n: usize,
    d_feat: usize,
    c_bev: usize,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec2(&mut self, v: Vec2) {
        self.f64(v.x);
        self.f64(v.y);
    }
}

fn encode_scene(s: &Scene) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u64(s.id);
    w.u8(s.kind.index() as u8);
    w.u8(s.behavior.index() as u8);
    w.u8(s.command_mismatch as u8);
    w.u8(s.ego.command.index() as u8);
    w.vec2(s.ego.velocity);
    w.vec2(s.ego.acceleration);
    w.u64(s.bev_tokens.len() as u64);
    for &v in &s.bev_tokens {
        w.f64(v);
    }
    for &c in s.semantic_map.cells() {
        w.u8(c as u8);
    }
    w.u64(s.agents.len() as u64);
    for a in &s.agents {
        w.vec2(a.position);
        w.vec2(a.velocity);
        w.vec2(a.half_extents);
        w.f64(a.heading);
    }
    w.u64(s.route.len() as u64);
    for &p in &s.route {
        w.vec2(p);
    }
    for wp in &s.gt {
        w.f64(wp.x);
        w.f64(wp.y);
        w.f64(wp.heading);
    }
    w.0
}

/// Serialized form of a dataset; saving writes exactly these bytes.
pub fn dataset_bytes(d: &Dataset) -> Vec<u8> {
    let header = Header {
        version: d.version.clone(),
        seed: d.seed,
        n: d.scenes.len(),
        d_feat: d.d_feat,
        c_bev: d.c_bev,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for s in &d.scenes {
        let rec = encode_scene(s);
        out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    out
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_bytes(d)).map_err(|e| PlannerError::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, what: &str, max: usize) -> std::result::Result<usize, String> {
        let n = self.u64()?;
        if n as usize > max {
            return Err(format!("{what} count {n} exceeds the remaining data"));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec2(&mut self) -> std::result::Result<Vec2, String> {
        Ok(Vec2::new(self.f64()?, self.f64()?))
    }
}

fn decode_scene(rec: &[u8]) -> std::result::Result<Scene, String> {
    let mut r = Reader { buf: rec, pos: 0 };
    let id = r.u64()?;
    let bad = |what: &str, v: u8| format!("invalid {what} tag {v}");
    let v = r.u8()?;
    let kind = *ScenarioKind::ALL.get(v as usize).ok_or_else(|| bad("scenario", v))?;
    let v = r.u8()?;
    let behavior = *Behavior::ALL.get(v as usize).ok_or_else(|| bad("behavior", v))?;
    let command_mismatch = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(bad("mismatch flag", v)),
    };
    let v = r.u8()?;
    let command = Command::from_index(v as usize).ok_or_else(|| bad("command", v))?;
    let ego = EgoState {
        command,
        velocity: r.vec2()?,
        acceleration: r.vec2()?,
    };
    let n = r.len("token", rec.len() / 8)?;
    let bev_tokens = (0..n).map(|_| r.f64()).collect::<std::result::Result<_, _>>()?;
    let cells = (0..GRID * GRID)
        .map(|_| {
            let v = r.u8()?;
            CellClass::from_u8(v).ok_or_else(|| bad("cell", v))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let semantic_map = SemanticMap::from_cells(cells).expect("grid-sized");
    let n = r.len("agent", rec.len() / 56)?;
    let mut agents = Vec::with_capacity(n);
    for _ in 0..n {
        agents.push(Agent {
            position: r.vec2()?,
            velocity: r.vec2()?,
            half_extents: r.vec2()?,
            heading: r.f64()?,
        });
    }
    let n = r.len("route point", rec.len() / 16)?;
    let route = (0..n).map(|_| r.vec2()).collect::<std::result::Result<_, _>>()?;
    let mut gt = [Waypoint::default(); HORIZON];
    for w in &mut gt {
        *w = Waypoint {
            x: r.f64()?,
            y: r.f64()?,
            heading: r.f64()?,
        };
    }
    if r.pos != rec.len() {
        return Err(format!("{} trailing bytes in scene record", rec.len() - r.pos));
    }
    Ok(Scene {
        id,
        kind,
        behavior,
        command_mismatch,
        ego,
        bev_tokens,
        semantic_map,
        agents,
        route,
        gt,
    })
}

/// Parses dataset bytes; `path` only labels errors.
pub fn parse_dataset(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let fmt = |msg: String| PlannerError::format(path, msg);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| fmt(format!("bad header: {e}")))?;
    if header.version != GENERATOR_VERSION {
        return Err(PlannerError::Version {
            path: path.to_path_buf(),
            found: header.version,
            expected: GENERATOR_VERSION.into(),
        });
    }
    let mut r = Reader {
        buf: bytes,
        pos: nl + 1,
    };
    let mut scenes = Vec::new();
    for i in 0..header.n {
        let scene = r
            .u64()
            .and_then(|len| r.take(len as usize))
            .and_then(decode_scene)
            .map_err(|e| fmt(format!("scene {i}: {e}")))?;
        if scene.bev_tokens.len() != header.c_bev * header.d_feat {
            return Err(fmt(format!("scene {i}: token count does not match the header")));
        }
        scenes.push(scene);
    }
    if r.pos != bytes.len() {
        return Err(fmt(format!("{} bytes after the last scene", bytes.len() - r.pos)));
    }
    Ok(Dataset {
        version: header.version,
        seed: header.seed,
        d_feat: header.d_feat,
        c_bev: header.c_bev,
        scenes,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| PlannerError::io(path, e))?;
    parse_dataset(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, SceneGenerator};

    fn data() -> Dataset {
        generate_dataset(&SceneGenerator::new(4, 16), 12, 9, 0.3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let d = data();
        let bytes = dataset_bytes(&d);
        let back = parse_dataset(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, d);
        assert_eq!(dataset_bytes(&back), bytes);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = dataset_bytes(&data());
        for cut in (0..bytes.len()).step_by(97) {
            let err = parse_dataset(&bytes[..cut], Path::new("mem")).unwrap_err();
            assert!(matches!(err, PlannerError::Format { .. }), "{err}");
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut d = data();
        d.version = "scene-synth/0".into();
        let err = parse_dataset(&dataset_bytes(&d), Path::new("mem")).unwrap_err();
        assert!(matches!(err, PlannerError::Version { .. }), "{err}");
    }

    #[test]
    fn empty_dataset_loads() {
        let mut d = data();
        d.scenes.clear();
        let back = parse_dataset(&dataset_bytes(&d), Path::new("mem")).unwrap();
        assert!(back.is_empty());
    }
}
