//! Color-palette vocabulary: k-means fitting, tokenization, detokenization.
//!
//! A [`Palette`] holds `k` RGB centroids. [`encode`] maps every pixel of an
//! [`RgbGrid`] to the index of its nearest centroid (squared L2 in raw
//! 0..=255 RGB), producing a [`TokenGrid`]; [`decode`] maps token ids back to
//! rounded centroid colors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One RGB pixel, 8-bit channels.
pub type Rgb = [u8; 3];

/// Learned color vocabulary: ordered list of centroids in raw 0..=255 scale.
///
/// Immutable after fitting; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    centroids: Vec<[f64; 3]>,
}

impl Palette {
    /// Builds a palette directly from centroid colors. Channels must lie in
    /// [0, 255] and centroids must be pairwise distinct.
    pub fn from_centroids(centroids: Vec<[f64; 3]>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::EmptyInput);
        }
        for c in &centroids {
            if c.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 255.0) {
                return Err(Error::InvalidArgument(format!(
                    "centroid channel out of [0,255]: {c:?}"
                )));
            }
        }
        for i in 0..centroids.len() {
            for j in i + 1..centroids.len() {
                if centroids[i] == centroids[j] {
                    return Err(Error::InvalidArgument(format!(
                        "duplicate centroids at {i} and {j}"
                    )));
                }
            }
        }
        Ok(Palette { centroids })
    }

    /// Number of centroids (the model vocabulary size).
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[[f64; 3]] {
        &self.centroids
    }

    /// Index of the nearest centroid to `pixel`; ties break to the lowest
    /// centroid index.
    pub fn nearest(&self, pixel: Rgb) -> usize {
        let p = [pixel[0] as f64, pixel[1] as f64, pixel[2] as f64];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(&p, c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Row-major RGB raster with 8-bit channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbGrid {
    height: usize,
    width: usize,
    pixels: Vec<Rgb>,
}

impl RgbGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<Rgb>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
        }
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for {height}x{width} grid",
                pixels.len()
            )));
        }
        Ok(RgbGrid { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, color: Rgb) -> Result<Self> {
        Self::new(height, width, vec![color; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> Rgb {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, color: Rgb) {
        self.pixels[row * self.width + col] = color;
    }
}

/// Row-major grid of palette-token ids, all `< k` of the paired palette.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    height: usize,
    width: usize,
    tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, tokens: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
        }
        if tokens.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens for {height}x{width} grid",
                tokens.len()
            )));
        }
        Ok(TokenGrid { height, width, tokens })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of cells (`height * width`), the sequence length L.
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.tokens[row * self.width + col]
    }

    pub fn set_at(&mut self, raster: usize, id: usize) {
        self.tokens[raster] = id;
    }

    /// Largest token id present plus one; lower bound on a compatible vocab.
    pub fn max_id(&self) -> usize {
        self.tokens.iter().copied().max().unwrap_or(0)
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dr = a[0] - b[0];
    let dg = a[1] - b[1];
    let db = a[2] - b[2];
    dr * dr + dg * dg + db * db
}

/// Lloyd's k-means over RGB pixels with k-means++ seeding.
///
/// Deterministic for a fixed `(pixels, k, seed, max_iters)` tuple. Terminates
/// when assignments stop changing or after `max_iters` rounds. Empty clusters
/// are reseeded to the point farthest from its currently assigned centroid.
pub fn fit_palette(pixels: &[Rgb], k: usize, seed: u64, max_iters: usize) -> Result<Palette> {
    if pixels.is_empty() {
        return Err(Error::EmptyInput);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut distinct: Vec<Rgb> = pixels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if k > distinct.len() {
        return Err(Error::InsufficientColors { k, distinct: distinct.len() });
    }

    let pts: Vec<[f64; 3]> = pixels
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(&pts, k, &mut rng);

    let mut assign = vec![usize::MAX; pts.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let a = nearest_idx(&centroids, p);
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
        }

        // Means of each cluster.
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in pts.iter().zip(&assign) {
            for ch in 0..3 {
                sums[a][ch] += p[ch];
            }
            counts[a] += 1;
        }
        let mut repaired = false;
        for c in 0..k {
            if counts[c] == 0 {
                centroids[c] = farthest_point(&pts, &assign, &centroids);
                repaired = true;
            } else {
                for ch in 0..3 {
                    centroids[c][ch] = sums[c][ch] / counts[c] as f64;
                }
            }
        }
        // Collapse exact duplicates by reseeding the later copy.
        for i in 0..k {
            for j in i + 1..k {
                if centroids[i] == centroids[j] {
                    centroids[j] = farthest_point(&pts, &assign, &centroids);
                    repaired = true;
                }
            }
        }
        if !changed && !repaired {
            break;
        }
    }

    Palette::from_centroids(centroids)
}

fn nearest_idx(centroids: &[[f64; 3]], p: &[f64; 3]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// k-means++ seeding: first centroid uniform, then proportional to squared
/// distance from the nearest chosen centroid.
fn seed_plus_plus(pts: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(pts[rng.gen_range(0..pts.len())]);
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = 0usize;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = i;
                    if u < d {
                        break;
                    }
                    u -= d;
                }
            }
            pick
        } else {
            // All points coincide with chosen centroids; caller guaranteed
            // enough distinct colors, so this cannot happen mid-seeding.
            0
        };
        centroids.push(pts[next]);
        for (i, p) in pts.iter().enumerate() {
            let d = sq_dist(p, &centroids[centroids.len() - 1]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Point with maximal distance to its assigned centroid (lowest index wins
/// ties); used to reseed empty or duplicate clusters.
fn farthest_point(pts: &[[f64; 3]], assign: &[usize], centroids: &[[f64; 3]]) -> [f64; 3] {
    let mut best = pts[0];
    let mut best_d = -1.0;
    for (p, &a) in pts.iter().zip(assign) {
        let d = sq_dist(p, &centroids[a.min(centroids.len() - 1)]);
        if d > best_d {
            best_d = d;
            best = *p;
        }
    }
    best
}

/// Maps every pixel to its nearest centroid index.
pub fn encode(image: &RgbGrid, palette: &Palette) -> TokenGrid {
    let tokens = image.pixels().iter().map(|&p| palette.nearest(p)).collect();
    TokenGrid {
        height: image.height(),
        width: image.width(),
        tokens,
    }
}

/// Maps token ids back to centroid colors rounded to 8-bit channels.
pub fn decode(tokens: &TokenGrid, palette: &Palette) -> Result<RgbGrid> {
    let mut pixels = Vec::with_capacity(tokens.area());
    for &t in tokens.tokens() {
        if t >= palette.k() {
            return Err(Error::TokenOutOfRange { id: t, vocab: palette.k() });
        }
        let c = palette.centroids()[t];
        pixels.push([
            c[0].round() as u8,
            c[1].round() as u8,
            c[2].round() as u8,
        ]);
    }
    RgbGrid::new(tokens.height(), tokens.width(), pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BLACK: Rgb = [0, 0, 0];
    const WHITE: Rgb = [255, 255, 255];

    #[test]
    fn two_separated_clusters_recovered() {
        let mut pixels = vec![BLACK; 8];
        pixels.extend(vec![WHITE; 8]);
        let pal = fit_palette(&pixels, 2, 1, 100).unwrap();
        let mut got: Vec<[f64; 3]> = pal.centroids().to_vec();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![[0.0, 0.0, 0.0], [255.0, 255.0, 255.0]]);
    }

    #[test]
    fn k1_is_componentwise_mean() {
        let pixels = vec![[10, 0, 0], [20, 30, 0], [0, 0, 90]];
        let pal = fit_palette(&pixels, 1, 7, 50).unwrap();
        let c = pal.centroids()[0];
        assert!((c[0] - 10.0).abs() < 1e-12);
        assert!((c[1] - 10.0).abs() < 1e-12);
        assert!((c[2] - 30.0).abs() < 1e-12);
    }

    /// Brute-force check that a fit is a Lloyd fixed point: re-assigning all
    /// points to the returned centroids and recomputing means moves nothing.
    fn assert_lloyd_fixed_point(pixels: &[Rgb], pal: &Palette) {
        let k = pal.k();
        let assign: Vec<usize> = pixels.iter().map(|&p| pal.nearest(p)).collect();
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (&p, &a) in pixels.iter().zip(&assign) {
            for ch in 0..3 {
                sums[a][ch] += p[ch] as f64;
            }
            counts[a] += 1;
        }
        for c in 0..k {
            assert!(counts[c] > 0, "cluster {c} empty after fit");
            for ch in 0..3 {
                let mean = sums[c][ch] / counts[c] as f64;
                assert!(
                    (mean - pal.centroids()[c][ch]).abs() < 1e-9,
                    "centroid {c} not the mean of its cluster"
                );
            }
        }
        // One more assignment pass against the recomputed means changes nothing.
        let moved = Palette::from_centroids(
            (0..k)
                .map(|c| {
                    let n = counts[c] as f64;
                    [sums[c][0] / n, sums[c][1] / n, sums[c][2] / n]
                })
                .collect(),
        )
        .unwrap();
        for (&p, &a) in pixels.iter().zip(&assign) {
            assert_eq!(moved.nearest(p), a, "assignment moved for pixel {p:?}");
        }
    }

    #[test]
    fn four_blobs_recovered_and_fixed_point() {
        // 1000 samples from 4 well-separated color blobs.
        let blob_means: [[i32; 3]; 4] =
            [[30, 30, 30], [220, 40, 40], [40, 220, 40], [40, 40, 220]];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut pixels = Vec::new();
        for i in 0..1000 {
            let m = blob_means[i % 4];
            let jitter = |v: i32, r: &mut ChaCha8Rng| -> u8 {
                (v + r.gen_range(-8..=8)).clamp(0, 255) as u8
            };
            pixels.push([
                jitter(m[0], &mut rng),
                jitter(m[1], &mut rng),
                jitter(m[2], &mut rng),
            ]);
        }
        let pal = fit_palette(&pixels, 4, 5, 200).unwrap();
        assert_lloyd_fixed_point(&pixels, &pal);
        // Each blob mean has a centroid within L2 distance 10.
        for m in blob_means {
            let mf = [m[0] as f64, m[1] as f64, m[2] as f64];
            let d = pal
                .centroids()
                .iter()
                .map(|c| sq_dist(c, &mf).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(d < 10.0, "no centroid within 10 of blob {m:?} (got {d})");
        }
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_palette(&[], 1, 0, 10), Err(Error::EmptyInput)));
        let pixels = vec![BLACK, BLACK, WHITE];
        let err = fit_palette(&pixels, 3, 0, 10).unwrap_err();
        assert!(err.to_string().contains("insufficient colors"), "{err}");
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pixels: Vec<Rgb> = (0..500).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let a = fit_palette(&pixels, 16, 42, 100).unwrap();
        let b = fit_palette(&pixels, 16, 42, 100).unwrap();
        assert_eq!(a, b);
        let c = fit_palette(&pixels, 16, 43, 100).unwrap();
        assert_ne!(a, c, "different seeds should explore different seedings");
    }

    #[test]
    fn encode_pure_black() {
        let pal = Palette::from_centroids(vec![[0.0; 3], [255.0; 3]]).unwrap();
        let img = RgbGrid::filled(3, 4, BLACK).unwrap();
        let toks = encode(&img, &pal);
        assert!(toks.tokens().iter().all(|&t| t == 0));
    }

    #[test]
    fn encode_tie_breaks_to_lowest_index() {
        let pal = Palette::from_centroids(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let img = RgbGrid::filled(1, 1, [1, 0, 0]).unwrap();
        assert_eq!(encode(&img, &pal).tokens()[0], 0);
    }

    #[test]
    fn encode_matches_bruteforce_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pixels: Vec<Rgb> = (0..64).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let corpus: Vec<Rgb> = (0..400).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let pal = fit_palette(&corpus, 16, 0, 100).unwrap();
        let img = RgbGrid::new(8, 8, pixels).unwrap();
        let got = encode(&img, &pal);
        // Oracle: exhaustive distance comparison per pixel.
        for (i, &p) in img.pixels().iter().enumerate() {
            let pf = [p[0] as f64, p[1] as f64, p[2] as f64];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in pal.centroids().iter().enumerate() {
                let d = sq_dist(&pf, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(got.tokens()[i], best, "pixel {i}");
        }
    }

    #[test]
    fn decode_constant_and_roundtrip() {
        let pal = Palette::from_centroids(vec![[10.4, 0.0, 0.0], [0.0, 200.6, 0.0]]).unwrap();
        let toks = TokenGrid::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        let img = decode(&toks, &pal).unwrap();
        assert!(img.pixels().iter().all(|&p| p == [0, 201, 0]));

        let toks = TokenGrid::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let img = decode(&toks, &pal).unwrap();
        assert_eq!(encode(&img, &pal), toks);
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let pal = Palette::from_centroids(vec![[0.0; 3]]).unwrap();
        let toks = TokenGrid::new(1, 1, vec![1]).unwrap();
        assert!(matches!(
            decode(&toks, &pal),
            Err(Error::TokenOutOfRange { id: 1, vocab: 1 })
        ));
    }

    proptest! {
        /// encode(decode(T)) == T for any valid token grid: the nearest
        /// centroid of a (rounded) centroid is itself when centroids are
        /// distinct enough to survive rounding.
        #[test]
        fn prop_roundtrip_tokens(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(2..=16);
            // Spread centroids on a coarse lattice so rounding cannot merge them.
            let mut centroids = Vec::new();
            while centroids.len() < k {
                let c = [
                    (rng.gen_range(0..16) * 17) as f64,
                    (rng.gen_range(0..16) * 17) as f64,
                    (rng.gen_range(0..16) * 17) as f64,
                ];
                if !centroids.contains(&c) {
                    centroids.push(c);
                }
            }
            let pal = Palette::from_centroids(centroids).unwrap();
            let h = rng.gen_range(1..=6);
            let w = rng.gen_range(1..=6);
            let toks = TokenGrid::new(h, w, (0..h * w).map(|_| rng.gen_range(0..k)).collect()).unwrap();
            let img = decode(&toks, &pal).unwrap();
            prop_assert_eq!(encode(&img, &pal), toks);
        }

        /// Encoding an already-decoded image is idempotent.
        #[test]
        fn prop_encode_idempotent(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let corpus: Vec<Rgb> = (0..200).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let pal = fit_palette(&corpus, 8, seed, 100).unwrap();
            let img = RgbGrid::new(4, 4, (0..16).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap();
            let once = encode(&img, &pal);
            let again = encode(&decode(&once, &pal).unwrap(), &pal);
            prop_assert_eq!(once, again);
        }
    }
}
