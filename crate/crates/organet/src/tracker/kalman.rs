//! Constant-velocity Kalman filter over 2-d positions (unit frame step).

/// State `[cx, cy, vx, vy]` with full covariance. Position measurements only.
#[derive(Debug, Clone)]
pub struct KalmanCv2d {
    pub x: [f64; 4],
    pub p: [[f64; 4]; 4],
    q: f64,
    r: f64,
}

/// Default process noise (per state component, per frame).
pub const DEFAULT_PROCESS_NOISE: f64 = 1e-2;
/// Default measurement noise.
pub const DEFAULT_MEASUREMENT_NOISE: f64 = 1e-2;
/// Initial velocity variance: velocities are unknown at track birth.
const INIT_VEL_VAR: f64 = 1e3;

impl KalmanCv2d {
    pub fn new(cx: f64, cy: f64) -> Self {
        Self::with_noise(cx, cy, DEFAULT_PROCESS_NOISE, DEFAULT_MEASUREMENT_NOISE)
    }

    pub fn with_noise(cx: f64, cy: f64, q: f64, r: f64) -> Self {
        let mut p = [[0.0; 4]; 4];
        p[0][0] = 1.0;
        p[1][1] = 1.0;
        p[2][2] = INIT_VEL_VAR;
        p[3][3] = INIT_VEL_VAR;
        KalmanCv2d {
            x: [cx, cy, 0.0, 0.0],
            p,
            q,
            r,
        }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x[0], self.x[1])
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.x[2], self.x[3])
    }

    /// Advance one frame under the constant-velocity model; returns the
    /// predicted position.
    pub fn predict(&mut self) -> (f64, f64) {
        // x' = F x with F = [[1,0,1,0],[0,1,0,1],[0,0,1,0],[0,0,0,1]]
        self.x[0] += self.x[2];
        self.x[1] += self.x[3];
        // P' = F P F^T + Q
        let p = self.p;
        let mut fp = [[0.0; 4]; 4];
        for j in 0..4 {
            fp[0][j] = p[0][j] + p[2][j];
            fp[1][j] = p[1][j] + p[3][j];
            fp[2][j] = p[2][j];
            fp[3][j] = p[3][j];
        }
        let mut next = [[0.0; 4]; 4];
        for i in 0..4 {
            next[i][0] = fp[i][0] + fp[i][2];
            next[i][1] = fp[i][1] + fp[i][3];
            next[i][2] = fp[i][2];
            next[i][3] = fp[i][3];
        }
        for (i, row) in next.iter_mut().enumerate() {
            row[i] += self.q;
        }
        self.p = next;
        (self.x[0], self.x[1])
    }

    /// Minimum-variance correction toward a position measurement.
    pub fn update(&mut self, mx: f64, my: f64) {
        let p = self.p;
        // S = H P H^T + R (2x2, H selects positions)
        let s = [
            [p[0][0] + self.r, p[0][1]],
            [p[1][0], p[1][1] + self.r],
        ];
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let si = [
            [s[1][1] / det, -s[0][1] / det],
            [-s[1][0] / det, s[0][0] / det],
        ];
        // K = P H^T S^-1 (4x2)
        let mut k = [[0.0; 2]; 4];
        for i in 0..4 {
            for j in 0..2 {
                k[i][j] = p[i][0] * si[0][j] + p[i][1] * si[1][j];
            }
        }
        let innov = [mx - self.x[0], my - self.x[1]];
        for i in 0..4 {
            self.x[i] += k[i][0] * innov[0] + k[i][1] * innov[1];
        }
        // P = (I - K H) P
        let mut next = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                next[i][j] = p[i][j] - (k[i][0] * p[0][j] + k[i][1] * p[1][j]);
            }
        }
        self.p = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_target_predicts_exactly() {
        let mut kf = KalmanCv2d::new(10.0, -3.5);
        kf.update(10.0, -3.5);
        let (px, py) = kf.predict();
        assert_eq!((px, py), (10.0, -3.5));
    }

    #[test]
    fn constant_velocity_converges_within_half_pixel() {
        let mut kf = KalmanCv2d::new(0.0, 0.0);
        let (vx, vy) = (2.0, 3.0);
        for t in 1..=5 {
            kf.predict();
            kf.update(vx * t as f64, vy * t as f64);
        }
        let (px, py) = kf.predict(); // frame 6 forecast
        let (tx, ty) = (vx * 6.0, vy * 6.0);
        let err = ((px - tx).powi(2) + (py - ty).powi(2)).sqrt();
        assert!(err < 0.5, "prediction error {err}");
    }

    #[test]
    fn zero_innovation_keeps_position() {
        let mut kf = KalmanCv2d::new(4.0, 7.0);
        kf.predict();
        let (px, py) = kf.position();
        kf.update(px, py);
        assert_eq!(kf.position(), (px, py));
    }

    #[test]
    fn covariance_stays_symmetric_positive() {
        let mut kf = KalmanCv2d::new(0.0, 0.0);
        for t in 0..50 {
            kf.predict();
            if t % 3 != 0 {
                kf.update(t as f64 * 0.5, t as f64 * -0.25);
            }
            for i in 0..4 {
                assert!(kf.p[i][i] > 0.0);
                for j in 0..4 {
                    assert!((kf.p[i][j] - kf.p[j][i]).abs() < 1e-6);
                }
            }
        }
    }
}
