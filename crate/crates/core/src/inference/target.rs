use rand_chacha::ChaCha8Rng;

/// How a Metropolis move perturbs its coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MoveKind {
    /// Gaussian random walk with an adapted covariance.
    Joint,
    /// One scalar increment added to every coordinate.
    Shift,
    /// Independent draws from `N(0, sd^2)` for every coordinate.
    Independent(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Move {
    pub name: String,
    pub indices: Vec<usize>,
    pub kind: MoveKind,
    /// Proposals per sweep.
    pub repeat: usize,
}

impl Move {
    pub fn joint(name: impl Into<String>, indices: Vec<usize>) -> Self {
        Self { name: name.into(), indices, kind: MoveKind::Joint, repeat: 1 }
    }

    pub fn shift(name: impl Into<String>, indices: Vec<usize>) -> Self {
        Self { name: name.into(), indices, kind: MoveKind::Shift, repeat: 1 }
    }

    pub fn independent(name: impl Into<String>, indices: Vec<usize>, sd: f64) -> Self {
        Self { name: name.into(), indices, kind: MoveKind::Independent(sd), repeat: 1 }
    }

    pub fn repeated(mut self, times: usize) -> Self {
        self.repeat = times.max(1);
        self
    }
}

/// Log density on an unconstrained vector.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;

    /// `-inf` outside the support.
    fn log_density(&self, theta: &[f64]) -> f64;

    /// Fills `grad` and returns the log density.
    fn log_density_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64;

    /// Moves of one Metropolis sweep, applied in order.
    fn moves(&self) -> Vec<Move> {
        vec![Move::joint("all", (0..self.dim()).collect())]
    }

    fn evaluator<'a>(&'a self, theta: &[f64]) -> Box<dyn Evaluator + 'a> {
        Box::new(FullEvaluator::new(self, theta))
    }
}

/// Incremental evaluation of proposals for the Metropolis sweep.
pub trait Evaluator {
    fn theta(&self) -> &[f64];

    fn log_density(&self) -> f64;

    /// Change in log density from setting the coordinates of move `index` to
    /// `values`. The proposal is kept until `commit` or the next `propose`.
    fn propose(&mut self, index: usize, values: &[f64]) -> f64;

    fn commit(&mut self);
}

/// Evaluator that recomputes the full density for every proposal.
pub struct FullEvaluator<'a, T: Target + ?Sized> {
    target: &'a T,
    moves: Vec<Move>,
    theta: Vec<f64>,
    proposal: Vec<f64>,
    current: f64,
    pending: f64,
}

impl<'a, T: Target + ?Sized> FullEvaluator<'a, T> {
    pub fn new(target: &'a T, theta: &[f64]) -> Self {
        let current = target.log_density(theta);
        Self {
            target,
            moves: target.moves(),
            theta: theta.to_vec(),
            proposal: theta.to_vec(),
            current,
            pending: current,
        }
    }
}

impl<T: Target + ?Sized> Evaluator for FullEvaluator<'_, T> {
    fn theta(&self) -> &[f64] {
        &self.theta
    }

    fn log_density(&self) -> f64 {
        self.current
    }

    fn propose(&mut self, index: usize, values: &[f64]) -> f64 {
        self.proposal.copy_from_slice(&self.theta);
        for (&i, &v) in self.moves[index].indices.iter().zip(values) {
            self.proposal[i] = v;
        }
        self.pending = self.target.log_density(&self.proposal);
        self.pending - self.current
    }

    fn commit(&mut self) {
        self.theta.copy_from_slice(&self.proposal);
        self.current = self.pending;
    }
}
