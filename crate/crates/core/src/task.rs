//! Sinusoid regression tasks.

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const AMPLITUDE_RANGE: (f64, f64) = (0.1, 5.0);
pub const PHASE_RANGE: (f64, f64) = (0.0, std::f64::consts::PI);
pub const INPUT_RANGE: (f64, f64) = (-5.0, 5.0);

/// `y = A sin(x - φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl SineTask {
    pub fn new(amplitude: f64, phase: f64) -> Option<Self> {
        let ok = (AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1).contains(&amplitude)
            && (PHASE_RANGE.0..=PHASE_RANGE.1).contains(&phase);
        ok.then_some(SineTask { amplitude, phase })
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (x - self.phase).sin()
    }
}

/// K-shot adaptation set plus a disjoint evaluation set for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task: SineTask,
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
    pub eval_x: Vec<f64>,
    pub eval_y: Vec<f64>,
}

pub fn sample_task(rng: &mut impl Rng) -> SineTask {
    SineTask {
        amplitude: rng.gen_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1),
        phase: rng.gen_range(PHASE_RANGE.0..=PHASE_RANGE.1),
    }
}

fn sample_points(task: &SineTask, n: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(INPUT_RANGE.0..=INPUT_RANGE.1)).collect();
    let ys = xs.iter().map(|&x| task.eval(x)).collect();
    (xs, ys)
}

/// Panics if `k` or `n_eval` is zero.
pub fn sample_episode(task: SineTask, k: usize, n_eval: usize, rng: &mut impl Rng) -> Episode {
    assert!(k >= 1 && n_eval >= 1, "episode sizes must be positive");
    let (train_x, train_y) = sample_points(&task, k, rng);
    let (eval_x, eval_y) = sample_points(&task, n_eval, rng);
    Episode {
        task,
        train_x,
        train_y,
        eval_x,
        eval_y,
    }
}
