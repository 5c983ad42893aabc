//! Classic cart-pole balance task with explicit Euler integration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
pub const HALF_LENGTH: f64 = 0.5;
pub const DT: f64 = 0.02;
pub const FORCE: f64 = 10.0;
pub const X_LIMIT: f64 = 2.4;
pub const THETA_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
pub const MAX_STEPS: u32 = 1000;
pub const INIT_RANGE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub step_count: u32,
    pub terminated: bool,
}

impl CartPoleState {
    pub fn new(x: f64, x_dot: f64, theta: f64, theta_dot: f64) -> Self {
        let mut s = Self {
            x,
            x_dot,
            theta,
            theta_dot,
            step_count: 0,
            terminated: false,
        };
        s.terminated = s.out_of_bounds();
        s
    }

    /// Each component uniform in `±INIT_RANGE`, deterministic in `seed`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = || rng.gen_range(-INIT_RANGE..=INIT_RANGE);
        Self::new(u(), u(), u(), u())
    }

    pub fn observation(&self) -> [f64; 4] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    fn out_of_bounds(&self) -> bool {
        self.x.abs() > X_LIMIT || self.theta.abs() > THETA_LIMIT
    }
}

/// Advances one `DT` step under a horizontal force on the cart.
pub fn cartpole_step(s: &CartPoleState, force: f64) -> Result<CartPoleState> {
    if s.terminated {
        return Err(Error::Contract(format!(
            "cart-pole stepped after termination at step {}",
            s.step_count
        )));
    }
    let total = CART_MASS + POLE_MASS;
    let pml = POLE_MASS * HALF_LENGTH;
    let (sin, cos) = s.theta.sin_cos();
    let temp = (force + pml * s.theta_dot * s.theta_dot * sin) / total;
    let theta_acc = (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
    let x_acc = temp - pml * theta_acc * cos / total;

    let mut next = CartPoleState {
        x: s.x + DT * s.x_dot,
        x_dot: s.x_dot + DT * x_acc,
        theta: s.theta + DT * s.theta_dot,
        theta_dot: s.theta_dot + DT * theta_acc,
        step_count: s.step_count + 1,
        terminated: false,
    };
    next.terminated = next.out_of_bounds() || next.step_count >= MAX_STEPS;
    Ok(next)
}
