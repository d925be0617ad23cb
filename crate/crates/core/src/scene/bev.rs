//! Deterministic BEV feature tokens: pooled patch statistics of the semantic
//! map and agents, passed through a fixed random projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{Agent, SemanticMap, CELL, GRID, MAP_X0, MAP_Y0, NUM_CLASSES};

/// Generator version tag; also seeds the token projection.
pub const GENERATOR_VERSION: &str = "scene-synth/1";

const STATS: usize = NUM_CLASSES + 2 + 4 + 2 + 1;

fn projection(d_feat: usize) -> Vec<f64> {
    let digest = Sha256::digest(GENERATOR_VERSION.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 2.0 / (STATS as f64).sqrt();
    (0..STATS * d_feat)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

/// `c_bev × d_feat` tokens, one per square patch of the map in row-major
/// patch order. `c_bev` must be a square whose side divides [`GRID`].
pub fn bev_tokens(map: &SemanticMap, agents: &[Agent], c_bev: usize, d_feat: usize) -> Vec<f64> {
    let side = (c_bev as f64).sqrt() as usize;
    assert!(side * side == c_bev && GRID % side == 0, "c_bev {c_bev} does not tile the map");
    let patch = GRID / side;
    let w = projection(d_feat);
    let extent = GRID as f64 * CELL;
    let mut out = Vec::with_capacity(c_bev * d_feat);
    for pr in 0..side {
        for pc in 0..side {
            let mut f = [0.0; STATS];
            for r in pr * patch..(pr + 1) * patch {
                for c in pc * patch..(pc + 1) * patch {
                    f[map.get(r, c) as usize] += 1.0;
                }
            }
            let cells = (patch * patch) as f64;
            for v in &mut f[..NUM_CLASSES] {
                *v /= cells;
            }
            let cx = MAP_X0 + (pc as f64 + 0.5) * patch as f64 * CELL;
            let cy = MAP_Y0 + (pr as f64 + 0.5) * patch as f64 * CELL;
            let (nx, ny) = (cx / extent, cy / extent);
            f[4] = nx;
            f[5] = ny;
            let tau = std::f64::consts::TAU;
            f[6] = (tau * nx).sin();
            f[7] = (tau * nx).cos();
            f[8] = (tau * ny).sin();
            f[9] = (tau * ny).cos();
            let x_lo = MAP_X0 + (pc * patch) as f64 * CELL;
            let y_lo = MAP_Y0 + (pr * patch) as f64 * CELL;
            let size = patch as f64 * CELL;
            let inside: Vec<&Agent> = agents
                .iter()
                .filter(|a| {
                    let p = a.position;
                    p.x >= x_lo && p.x < x_lo + size && p.y >= y_lo && p.y < y_lo + size
                })
                .collect();
            if !inside.is_empty() {
                let n = inside.len() as f64;
                f[10] = inside.iter().map(|a| a.velocity.x).sum::<f64>() / (10.0 * n);
                f[11] = inside.iter().map(|a| a.velocity.y).sum::<f64>() / (10.0 * n);
            }
            f[12] = 1.0;
            for j in 0..d_feat {
                let z: f64 = (0..STATS).map(|i| f[i] * w[i * d_feat + j]).sum();
                out.push(z.tanh());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::scene::CellClass;

    #[test]
    fn tokens_are_pure_and_bounded() {
        let map = SemanticMap::filled(CellClass::Drivable);
        let a = bev_tokens(&map, &[], 16, 8);
        let b = bev_tokens(&map, &[], 16, 8);
        assert_eq!(a, b);
        assert_eq!(a.len(), 16 * 8);
        assert!(a.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn tokens_see_map_and_agents() {
        let open = SemanticMap::filled(CellClass::Drivable);
        let blocked = SemanticMap::filled(CellClass::NonDrivable);
        assert_ne!(bev_tokens(&open, &[], 64, 8), bev_tokens(&blocked, &[], 64, 8));
        let agent = Agent {
            position: Vec2::new(10.0, 0.0),
            velocity: Vec2::new(-5.0, 0.0),
            half_extents: Vec2::new(2.25, 1.0),
            heading: std::f64::consts::PI,
        };
        assert_ne!(bev_tokens(&open, &[], 64, 8), bev_tokens(&open, &[agent], 64, 8));
    }
}
