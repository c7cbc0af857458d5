//! Built-in problems 1-12.
//!
//! In problems 11 and 12 the obstacle rectangles sit between start and
//! target so that trajectories have to bend around them.

use crate::densities::{Component, GaussianMixture};
use crate::objective::{ObstacleMap, Rect};
use crate::trainer::Problem;

/// Number of built-in problems.
pub const BUILTIN_COUNT: u8 = 12;

/// Penalty weight on the obstacle term used by the maze problems.
pub const MAZE_LAMBDA_P: f64 = 1e4;

/// Blur width of the maze obstacles.
pub const MAZE_BLUR: f64 = 0.5;

/// A built-in problem at a chosen dimension.
#[derive(Debug, Clone)]
pub struct Builtin {
    pub id: u8,
    pub problem: Problem,
    /// Obstacle penalty weight the problem is tuned for, when it has obstacles.
    pub lambda_p: Option<f64>,
}

/// Smallest dimension the problem is defined in.
pub fn min_dim(id: u8) -> usize {
    if id <= 4 {
        1
    } else {
        2
    }
}

/// Dimension used when none is requested.
pub fn default_dim(id: u8) -> usize {
    min_dim(id)
}

fn at(d: usize, coords: &[(usize, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for &(k, x) in coords {
        v[k] = x;
    }
    v
}

fn gauss(d: usize, weight: f64, mean: &[(usize, f64)], var: f64) -> Component {
    Component::isotropic(weight, at(d, mean), var)
}

fn mixture(components: Vec<Component>) -> GaussianMixture {
    GaussianMixture::new(components).expect("built-in mixtures are valid")
}

/// Rectangles of the maze problems.
pub fn maze(id: u8) -> Option<ObstacleMap> {
    let rect = |x0: f64, y0: f64, x1: f64, y1: f64| Rect {
        min: [x0, y0],
        max: [x1, y1],
    };
    let rects = match id {
        // a wall across the corridor with an opening left of center
        11 => vec![rect(-4.0, 7.5, 5.0, 8.5), rect(8.5, 7.5, 20.0, 8.5)],
        // a block on the diagonal
        12 => vec![rect(-1.5, -1.5, 1.5, 1.5)],
        _ => return None,
    };
    Some(ObstacleMap::new(rects, MAZE_BLUR))
}

/// Problem `id` in dimension `d`; `None` when the id is unknown or `d` is
/// below the problem's minimum dimension.
pub fn builtin(id: u8, d: usize) -> Option<Builtin> {
    if !(1..=BUILTIN_COUNT).contains(&id) || d < min_dim(id) {
        return None;
    }
    let o: &[(usize, f64)] = &[];
    let (rho0, rho1) = match id {
        1 => (vec![gauss(d, 1.0, o, 1.0)], vec![gauss(d, 2.0, o, 1.0)]),
        2 => (vec![gauss(d, 1.0, o, 1.0)], vec![gauss(d, 0.5, o, 1.0)]),
        3 => (vec![gauss(d, 1.0, o, 1.0)], vec![gauss(d, 2.0, &[(0, 4.0)], 1.0)]),
        4 => (vec![gauss(d, 1.0, o, 1.0)], vec![gauss(d, 0.5, &[(0, 4.0)], 1.0)]),
        5 => (vec![gauss(d, 1.0, o, 1.0)], vec![gauss(d, 0.5, &[(0, -4.0)], 1.0)]),
        6 => (vec![gauss(d, 1.0, o, 1.0)], vec![gauss(d, 2.0, &[(0, 4.0)], 1.0)]),
        7 => (vec![gauss(d, 1.0, o, 0.3)], vec![gauss(d, 2.0, &[(0, 4.0)], 0.3)]),
        8 => (
            vec![gauss(d, 1.0, &[(0, -4.0), (1, -4.0)], 1.0)],
            vec![gauss(d, 0.5, &[(0, 4.0), (1, 4.0)], 1.0)],
        ),
        9 => (
            vec![gauss(d, 1.0, o, 1.0)],
            vec![gauss(d, 1.0, &[(0, -2.0)], 1.0), gauss(d, 1.0, &[(0, 2.0)], 1.0)],
        ),
        10 => (
            vec![gauss(d, 1.0, &[(0, -2.0)], 1.0), gauss(d, 1.0, &[(0, 2.0)], 1.0)],
            vec![gauss(d, 1.0, o, 1.0)],
        ),
        11 => (
            vec![gauss(d, 1.0, &[(0, 8.0), (1, 4.0)], 1.0)],
            vec![gauss(d, 0.5, &[(0, 8.0), (1, 12.0)], 0.3)],
        ),
        12 => (
            vec![gauss(d, 1.0, &[(0, -4.0), (1, -4.0)], 1.0)],
            vec![gauss(d, 0.5, &[(0, 4.0), (1, 4.0)], 0.3)],
        ),
        _ => unreachable!(),
    };
    let obstacles = maze(id);
    Some(Builtin {
        id,
        lambda_p: obstacles.as_ref().map(|_| MAZE_LAMBDA_P),
        problem: Problem {
            rho0: mixture(rho0),
            rho1: mixture(rho1),
            obstacles,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masses_match_the_list() {
        let expected = [
            (1, 1.0, 2.0),
            (2, 1.0, 0.5),
            (3, 1.0, 2.0),
            (4, 1.0, 0.5),
            (5, 1.0, 0.5),
            (6, 1.0, 2.0),
            (7, 1.0, 2.0),
            (8, 1.0, 0.5),
            (9, 1.0, 2.0),
            (10, 2.0, 1.0),
            (11, 1.0, 0.5),
            (12, 1.0, 0.5),
        ];
        for (id, m0, m1) in expected {
            let b = builtin(id, default_dim(id)).unwrap();
            assert_eq!(b.problem.rho0.total_mass(), m0, "test {id}");
            assert_eq!(b.problem.rho1.total_mass(), m1, "test {id}");
            assert_eq!(b.problem.obstacles.is_some(), id >= 11);
        }
    }

    #[test]
    fn rejects_unknown_and_low_dimension() {
        assert!(builtin(0, 2).is_none());
        assert!(builtin(13, 2).is_none());
        assert!(builtin(5, 1).is_none());
        assert!(builtin(1, 3).is_some());
    }

    #[test]
    fn mazes_separate_start_and_target() {
        for id in [11, 12] {
            let b = builtin(id, 2).unwrap();
            let obs = b.problem.obstacles.unwrap();
            let start = b.problem.rho0.mean();
            let end = b.problem.rho1.mean();
            assert!(obs.value(&start) < 0.01 && obs.value(&end) < 0.01);
            let blocked = (0..=100).any(|k| {
                let s = k as f64 / 100.0;
                let p = [start[0] + s * (end[0] - start[0]), start[1] + s * (end[1] - start[1])];
                obs.value(&p) > 0.5
            });
            assert!(blocked, "test {id}: straight path is free");
        }
    }
}
