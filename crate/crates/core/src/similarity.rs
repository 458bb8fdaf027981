//! Canvas-vs-target scoring used by the stroke planner's reward.
//!
//! Two providers share one interface: a deterministic negated-MSE baseline,
//! and a conditional discriminator whose linear layers are spectrally
//! normalized before every forward pass and trained with a hinge loss.
//! Higher scores mean more similar.

use ndarray::{Array1, Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canvas::Canvas;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, DenseNetwork, Gradients};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Power-iteration count per spectral normalization (>= 1).
    pub power_iterations: usize,
    pub learning_rate: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { hidden: vec![128, 64], power_iterations: 20, learning_rate: 1e-4 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.power_iterations < 1 {
            return Err(Error::InvalidValue("power_iterations must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidValue("discriminator learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Result of spectrally normalizing a weight matrix.
#[derive(Debug, Clone)]
pub struct SpectralNorm {
    pub matrix: Array2<f64>,
    /// Power-iteration estimate of the largest singular value of the input.
    pub sigma: f64,
    /// Set when the input was (numerically) zero and returned unchanged.
    pub degenerate: bool,
}

/// Power-iterate at least `min_iterations` times, then continue until the
/// singular-value estimate stabilizes. The estimate approaches the true
/// norm from below, so stopping early would leave the normalized matrix
/// slightly above unit norm; the convergence tail keeps that excess within
/// tight bounds even for near-degenerate spectra.
fn power_iterate(w: &Array2<f64>, min_iterations: usize, u: &mut Array1<f64>) -> f64 {
    const MAX_ITERATIONS: usize = 10_000;
    let wt = w.t();
    let mut sigma = 0.0;
    for it in 0..MAX_ITERATIONS {
        let mut v = wt.dot(u);
        let vn = v.dot(&v).sqrt();
        if vn == 0.0 {
            return 0.0;
        }
        v /= vn;
        let mut nu = w.dot(&v);
        let un = nu.dot(&nu).sqrt();
        if un == 0.0 {
            return 0.0;
        }
        nu /= un;
        *u = nu;
        let estimate = {
            let v = wt.dot(u);
            v.dot(&v).sqrt()
        };
        let converged = (estimate - sigma).abs() <= 1e-13 * estimate.max(1.0);
        sigma = estimate;
        if it + 1 >= min_iterations && converged {
            break;
        }
    }
    sigma
}

/// Divide a matrix by its largest singular value, estimated by power
/// iteration from a deterministic start. A zero matrix is returned
/// unchanged with `degenerate` set.
pub fn spectral_normalize(w: &Array2<f64>, iterations: usize) -> SpectralNorm {
    let iterations = iterations.max(1);
    let mut u = Array1::from_elem(w.nrows(), 1.0 / (w.nrows() as f64).sqrt());
    let sigma = power_iterate(w, iterations, &mut u);
    if sigma <= 0.0 {
        return SpectralNorm { matrix: w.clone(), sigma: 0.0, degenerate: true };
    }
    SpectralNorm { matrix: w / sigma, sigma, degenerate: false }
}

/// Conditional discriminator over stacked (canvas, target) channel pairs.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub net: DenseNetwork,
    cfg: DiscriminatorConfig,
    /// Persistent power-iteration vectors, one per layer.
    u: Vec<Array1<f64>>,
    adam: Adam,
    canvas_pixels: usize,
}

impl Discriminator {
    pub fn new(canvas_pixels: usize, cfg: DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut dims = vec![2 * canvas_pixels];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(1);
        let net = DenseNetwork::new(&dims, Activation::Relu, Activation::Identity, rng);
        let u = net
            .layers
            .iter()
            .map(|l| Array1::from_elem(l.weight.nrows(), 1.0 / (l.weight.nrows() as f64).sqrt()))
            .collect();
        let adam = Adam::new(&net, cfg.learning_rate);
        Ok(Self { net, cfg, u, adam, canvas_pixels })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn canvas_pixels(&self) -> usize {
        self.canvas_pixels
    }

    /// Project every layer's weights onto unit spectral norm (in place),
    /// using the persistent power-iteration state.
    pub fn normalize_layers(&mut self) {
        for (layer, u) in self.net.layers.iter_mut().zip(self.u.iter_mut()) {
            let sigma = power_iterate(&layer.weight, self.cfg.power_iterations, u);
            if sigma > 0.0 {
                layer.weight /= sigma;
            }
        }
    }

    fn features(&self, canvas: &Canvas, target: &Canvas) -> Result<Array1<f64>> {
        if canvas.width() != target.width() || canvas.height() != target.height() {
            return Err(Error::DimensionMismatch(format!(
                "canvas {}x{} vs target {}x{}",
                canvas.width(),
                canvas.height(),
                target.width(),
                target.height()
            )));
        }
        let n = (canvas.width() * canvas.height()) as usize;
        if n != self.canvas_pixels {
            return Err(Error::DimensionMismatch(format!(
                "discriminator built for {} pixels, got {n}",
                self.canvas_pixels
            )));
        }
        let mut feats = Vec::with_capacity(2 * n);
        feats.extend(canvas.cells().iter().map(|&v| v as f64));
        feats.extend(target.cells().iter().map(|&v| v as f64));
        Ok(Array1::from_vec(feats))
    }

    fn batch_features(&self, pairs: &[(&Canvas, &Canvas)]) -> Result<Array2<f64>> {
        let mut rows = Array2::zeros((pairs.len(), 2 * self.canvas_pixels));
        for (i, (canvas, target)) in pairs.iter().enumerate() {
            let f = self.features(canvas, target)?;
            rows.row_mut(i).assign(&f);
        }
        Ok(rows)
    }

    /// Scalar similarity d(canvas, target) with the current weights.
    pub fn score(&self, canvas: &Canvas, target: &Canvas) -> Result<f64> {
        let f = self.features(canvas, target)?;
        let out = self.net.forward(f.insert_axis(ndarray::Axis(0)).view())?;
        Ok(out[(0, 0)])
    }

    /// One hinge-loss gradient step:
    /// `mean(relu(1 - d(real))) + mean(relu(1 + d(fake)))`, with every
    /// layer spectrally normalized before the forward pass. Returns the loss.
    pub fn update(
        &mut self,
        real: &[(&Canvas, &Canvas)],
        fake: &[(&Canvas, &Canvas)],
    ) -> Result<f64> {
        if real.is_empty() || fake.is_empty() {
            return Err(Error::InvalidValue("discriminator update needs non-empty batches".into()));
        }
        self.normalize_layers();
        let real_x = self.batch_features(real)?;
        let fake_x = self.batch_features(fake)?;

        let (real_loss, real_grads) = self.hinge_pass(real_x.view(), true)?;
        let (fake_loss, fake_grads) = self.hinge_pass(fake_x.view(), false)?;
        let mut grads = real_grads;
        grads.add_assign(&fake_grads);
        self.adam.step(&mut self.net, &grads);
        self.normalize_layers();
        Ok(real_loss + fake_loss)
    }

    fn hinge_pass(&self, x: ArrayView2<f64>, real: bool) -> Result<(f64, Gradients)> {
        let cache = self.net.forward_cached(x)?;
        let d = cache.output();
        let batch = d.nrows() as f64;
        let mut loss = 0.0;
        let mut upstream = Array2::zeros(d.raw_dim());
        for (i, &di) in d.column(0).iter().enumerate() {
            let margin = if real { 1.0 - di } else { 1.0 + di };
            if margin > 0.0 {
                loss += margin / batch;
                upstream[(i, 0)] = if real { -1.0 / batch } else { 1.0 / batch };
            }
        }
        Ok((loss, self.net.backward(&cache, upstream.view())))
    }
}

/// Pluggable canvas-vs-target scoring. The L2 variant needs no training and
/// keeps every environment test independent of adversarial machinery.
#[derive(Debug, Clone)]
pub enum SimilarityProvider {
    L2,
    Adversarial(Discriminator),
}

impl SimilarityProvider {
    /// Score a canvas against a target; higher is more similar. The L2
    /// variant returns the negated mean squared pixel difference, so equal
    /// canvases score exactly 0.
    pub fn score(&self, canvas: &Canvas, target: &Canvas) -> Result<f64> {
        match self {
            SimilarityProvider::L2 => Ok(-canvas.mean_squared_diff(target)?),
            SimilarityProvider::Adversarial(d) => d.score(canvas, target),
        }
    }

    /// One discriminator gradient step; errors on the L2 variant.
    pub fn discriminator_update(
        &mut self,
        real: &[(&Canvas, &Canvas)],
        fake: &[(&Canvas, &Canvas)],
    ) -> Result<f64> {
        match self {
            SimilarityProvider::L2 => Err(Error::Unsupported(
                "discriminator_update on the L2 similarity variant".into(),
            )),
            SimilarityProvider::Adversarial(d) => d.update(real, fake),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::PixelCoord;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;

    fn svd_sigma_max(w: &Array2<f64>) -> f64 {
        // independent oracle via nalgebra's full SVD
        let m = nalgebra::DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[(i, j)]);
        m.svd(false, false).singular_values.max()
    }

    #[test]
    fn l2_score_examples() {
        let a = Canvas::new(4, 4).unwrap();
        let b = Canvas::new(4, 4).unwrap();
        let sim = SimilarityProvider::L2;
        assert_eq!(sim.score(&a, &b).unwrap(), 0.0);
        assert_eq!(sim.score(&a, &a).unwrap(), 0.0);

        let mut c = b.clone();
        c.set(PixelCoord::new(2, 1), true).unwrap();
        assert_abs_diff_eq!(sim.score(&a, &c).unwrap(), -1.0 / 16.0, epsilon = 1e-15);
        // symmetry
        assert_eq!(sim.score(&a, &c).unwrap(), sim.score(&c, &a).unwrap());
    }

    #[test]
    fn l2_score_rejects_dimension_mismatch() {
        let a = Canvas::new(4, 4).unwrap();
        let b = Canvas::new(5, 4).unwrap();
        assert!(SimilarityProvider::L2.score(&a, &b).is_err());
    }

    #[test]
    fn l2_maximal_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sim = SimilarityProvider::L2;
        for _ in 0..50 {
            let mut a = Canvas::new(6, 6).unwrap();
            let mut b = Canvas::new(6, 6).unwrap();
            for y in 0..6 {
                for x in 0..6 {
                    if rng.random_bool(0.3) {
                        a.set(PixelCoord::new(x, y), true).unwrap();
                    }
                    if rng.random_bool(0.3) {
                        b.set(PixelCoord::new(x, y), true).unwrap();
                    }
                }
            }
            let s = sim.score(&a, &b).unwrap();
            if a == b {
                assert_eq!(s, 0.0);
            } else {
                assert!(s < 0.0);
            }
        }
    }

    #[test]
    fn spectral_normalize_identity_unchanged() {
        let w = Array2::eye(3);
        let r = spectral_normalize(&w, 10);
        assert!(!r.degenerate);
        assert_abs_diff_eq!(r.sigma, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.matrix, w, epsilon = 1e-12);
    }

    #[test]
    fn spectral_normalize_diagonal_matches_svd_oracle() {
        let w = array![[2.0, 0.0], [0.0, 1.0]];
        let r = spectral_normalize(&w, 60);
        assert_abs_diff_eq!(r.sigma, 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.matrix[(0, 0)], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.matrix[(1, 1)], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(svd_sigma_max(&r.matrix), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn spectral_normalize_is_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let normalized = spectral_normalize(&w, 100).matrix;
        let twice = spectral_normalize(&normalized.mapv(|v| 2.0 * v), 100).matrix;
        assert_abs_diff_eq!(twice, normalized, epsilon = 1e-9);
    }

    #[test]
    fn spectral_normalize_zero_matrix_flagged() {
        let w = Array2::zeros((3, 3));
        let r = spectral_normalize(&w, 5);
        assert!(r.degenerate);
        assert_eq!(r.matrix, w);
    }

    #[test]
    fn spectral_norm_estimate_close_to_one_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let rows = rng.random_range(2..12);
            let cols = rng.random_range(2..12);
            let w = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0));
            let normalized = spectral_normalize(&w, 100).matrix;
            let sigma = svd_sigma_max(&normalized);
            assert!(sigma <= 1.0 + 1e-3, "sigma = {sigma}");
        }
    }

    #[test]
    fn hinge_loss_is_two_at_zero_output_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut disc = Discriminator::new(16, DiscriminatorConfig::default(), &mut rng).unwrap();
        let last = disc.net.layers.len() - 1;
        disc.net.layers[last].weight.fill(0.0);
        disc.net.layers[last].bias.fill(0.0);
        let target = Canvas::new(4, 4).unwrap();
        let mut drawn = Canvas::new(4, 4).unwrap();
        drawn.set(PixelCoord::new(1, 1), true).unwrap();
        let real = vec![(&target, &target)];
        let fake = vec![(&drawn, &target)];
        let loss = disc.update(&real, &fake).unwrap();
        assert_abs_diff_eq!(loss, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn repeated_updates_on_fixed_batch_mostly_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DiscriminatorConfig { hidden: vec![32], ..Default::default() };
        let mut disc = Discriminator::new(16, cfg, &mut rng).unwrap();
        let mut target = Canvas::new(4, 4).unwrap();
        for x in 0..4 {
            target.set(PixelCoord::new(x, 2), true).unwrap();
        }
        let blank = Canvas::new(4, 4).unwrap();
        let mut partial = Canvas::new(4, 4).unwrap();
        partial.set(PixelCoord::new(0, 0), true).unwrap();
        let real = vec![(&target, &target)];
        let fake = vec![(&blank, &target), (&partial, &target)];
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(disc.update(&real, &fake).unwrap());
        }
        let non_increasing =
            losses.windows(2).filter(|w| w[1] <= w[0] + 1e-12).count();
        assert!(non_increasing >= 45, "only {non_increasing}/49 non-increasing: {losses:?}");
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn normalized_layers_stay_within_unit_spectral_norm_during_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DiscriminatorConfig { hidden: vec![24, 12], ..Default::default() };
        let mut disc = Discriminator::new(9, cfg, &mut rng).unwrap();
        let mut target = Canvas::new(3, 3).unwrap();
        target.set(PixelCoord::new(1, 1), true).unwrap();
        let blank = Canvas::new(3, 3).unwrap();
        let real = vec![(&target, &target)];
        let fake = vec![(&blank, &target)];
        for _ in 0..30 {
            disc.update(&real, &fake).unwrap();
            for layer in &disc.net.layers {
                let sigma = svd_sigma_max(&layer.weight);
                assert!(sigma <= 1.0 + 1e-3, "layer norm {sigma}");
            }
        }
    }

    #[test]
    fn empty_batch_and_l2_update_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut disc = Discriminator::new(16, DiscriminatorConfig::default(), &mut rng).unwrap();
        let target = Canvas::new(4, 4).unwrap();
        let pairs = vec![(&target, &target)];
        assert!(disc.update(&[], &pairs).is_err());
        assert!(disc.update(&pairs, &[]).is_err());

        let mut l2 = SimilarityProvider::L2;
        assert!(l2.discriminator_update(&pairs, &pairs).is_err());
    }

    #[test]
    fn discriminator_score_checks_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let disc = Discriminator::new(16, DiscriminatorConfig::default(), &mut rng).unwrap();
        let a = Canvas::new(4, 4).unwrap();
        let b = Canvas::new(5, 5).unwrap();
        assert!(disc.score(&a, &b).is_err());
        assert!(disc.score(&b, &b).is_err());
        assert!(disc.score(&a, &a).unwrap().is_finite());
    }
}
