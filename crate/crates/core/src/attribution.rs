//! Exact Shapley attribution over superpixel coalitions, plus the
//! foreground/background contribution accounting built on top of it.

use crate::data::SegmentationMask;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const MAX_PLAYERS: usize = 20;

/// Characteristic function tabulated over all 2^n coalitions.
/// `values[mask]` is v(S) where bit i of `mask` marks membership of player i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalitionGame {
    pub n: usize,
    pub values: Vec<f64>,
}

impl CoalitionGame {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n > MAX_PLAYERS {
            return Err(Error::TooManyPlayers(n, MAX_PLAYERS));
        }
        if values.len() != 1usize << n {
            return Err(Error::DimMismatch(format!(
                "game table has {} entries, expected {}",
                values.len(),
                1usize << n
            )));
        }
        Ok(CoalitionGame { n, values })
    }

    pub fn from_fn<F: FnMut(u32) -> f64>(n: usize, mut v: F) -> Result<Self> {
        if n > MAX_PLAYERS {
            return Err(Error::TooManyPlayers(n, MAX_PLAYERS));
        }
        let values = (0u32..1u32 << n).map(|m| v(m)).collect();
        CoalitionGame::new(n, values)
    }

    pub fn value(&self, mask: u32) -> f64 {
        self.values[mask as usize]
    }

    pub fn grand_value(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn empty_value(&self) -> f64 {
        self.values[0]
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Exact Shapley values: phi_i = sum over S not containing i of
/// |S|!(n-1-|S|)!/n! * (v(S u {i}) - v(S)). The weight is computed as
/// 1 / (n * C(n-1, |S|)) to stay exact for n <= 20.
pub fn exact_shapley(game: &CoalitionGame) -> Result<Vec<f64>> {
    let n = game.n;
    if n == 0 {
        return Err(Error::EmptySet("coalition game has no players"));
    }
    let weights: Vec<f64> = (0..n)
        .map(|s| 1.0 / (n as f64 * binomial(n - 1, s) as f64))
        .collect();
    let phi: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let bit = 1u32 << i;
            let mut acc = 0.0;
            for mask in 0u32..(1u32 << n) {
                if mask & bit == 0 {
                    let s = mask.count_ones() as usize;
                    acc += weights[s]
                        * (game.values[(mask | bit) as usize] - game.values[mask as usize]);
                }
            }
            acc
        })
        .collect();
    Ok(phi)
}

/// Monte Carlo Shapley by sampling player permutations. Returns the
/// estimates and their standard errors, for cross-checking the exact values.
pub fn monte_carlo_shapley(
    game: &CoalitionGame,
    permutations: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = game.n;
    if n == 0 {
        return Err(Error::EmptySet("coalition game has no players"));
    }
    if permutations == 0 {
        return Err(Error::EmptySet("need at least one permutation"));
    }
    let mut rng = SplitMix64::new(seed);
    let mut sums = vec![0.0; n];
    let mut sq_sums = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..permutations {
        rng.shuffle(&mut order);
        let mut mask = 0u32;
        let mut prev = game.values[0];
        for &p in &order {
            mask |= 1 << p;
            let cur = game.values[mask as usize];
            let marginal = cur - prev;
            sums[p] += marginal;
            sq_sums[p] += marginal * marginal;
            prev = cur;
        }
    }
    let m = permutations as f64;
    let phi: Vec<f64> = sums.iter().map(|s| s / m).collect();
    let se: Vec<f64> = (0..n)
        .map(|i| {
            if permutations < 2 {
                f64::INFINITY
            } else {
                let var = (sq_sums[i] - sums[i] * sums[i] / m) / (m - 1.0);
                (var.max(0.0) / m).sqrt()
            }
        })
        .collect();
    Ok((phi, se))
}

/// Partition of an H x W pixel grid into at most MAX_PLAYERS tiles.
/// `assignment[r*width + c]` is the tile index of pixel (r, c).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelPartition {
    pub height: usize,
    pub width: usize,
    pub n_tiles: usize,
    pub assignment: Vec<usize>,
}

impl SuperpixelPartition {
    pub fn tile_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_tiles];
        for &t in &self.assignment {
            sizes[t] += 1;
        }
        sizes
    }
}

fn axis_boundaries(len: usize, parts: usize) -> Vec<usize> {
    // ceil splits put the larger segments first; sizes differ by at most 1
    (0..=parts).map(|i| (i * len).div_ceil(parts)).collect()
}

/// Regular rows x cols grid with near-equal tiles (any two tile side
/// lengths differ by at most one pixel).
pub fn grid_partition(
    height: usize,
    width: usize,
    rows: usize,
    cols: usize,
) -> Result<SuperpixelPartition> {
    if rows == 0 || cols == 0 || height < rows || width < cols {
        return Err(Error::Domain(format!(
            "cannot split {height}x{width} into {rows}x{cols} tiles"
        )));
    }
    let n_tiles = rows * cols;
    if n_tiles > MAX_PLAYERS {
        return Err(Error::TooManyPlayers(n_tiles, MAX_PLAYERS));
    }
    let rb = axis_boundaries(height, rows);
    let cb = axis_boundaries(width, cols);
    let mut assignment = vec![0usize; height * width];
    for r in 0..height {
        let tr = rb.iter().skip(1).position(|&b| r < b).unwrap();
        for c in 0..width {
            let tc = cb.iter().skip(1).position(|&b| c < b).unwrap();
            assignment[r * width + c] = tr * cols + tc;
        }
    }
    Ok(SuperpixelPartition {
        height,
        width,
        n_tiles,
        assignment,
    })
}

/// Per-pixel mean of a set of [3,H,W] images, used as the masked-out
/// reference when forming coalitions.
pub fn mean_image(images: &[Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let shape = images[0].shape.clone();
    let mut data = vec![0.0; images[0].data.len()];
    for img in images {
        if img.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                img.shape, shape
            )));
        }
        for (d, v) in data.iter_mut().zip(&img.data) {
            *d += v;
        }
    }
    let n = images.len() as f64;
    data.iter_mut().for_each(|d| *d /= n);
    Ok(Tensor::new(shape, data))
}

fn composite(image: &Tensor, background: &Tensor, part: &SuperpixelPartition, mask: u32) -> Tensor {
    let (c, h, w) = (image.shape[0], image.shape[1], image.shape[2]);
    let mut data = background.data.clone();
    for ch in 0..c {
        let base = ch * h * w;
        for p in 0..h * w {
            if mask >> part.assignment[p] & 1 == 1 {
                data[base + p] = image.data[base + p];
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Tabulates one coalition game per output class: v_k(S) is the model's
/// logit for class k on the composite that keeps tiles in S from `image`
/// and takes everything else from `background`. Forward passes are batched
/// and run in parallel.
pub fn model_game_all_classes(
    model: &Model,
    image: &Tensor,
    background: &Tensor,
    part: &SuperpixelPartition,
) -> Result<Vec<CoalitionGame>> {
    if image.shape != background.shape {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            image.shape, background.shape
        )));
    }
    if image.shape.len() != 3 || image.shape[1] != part.height || image.shape[2] != part.width {
        return Err(Error::DimMismatch(format!(
            "image is {}x{} but partition covers {}x{}",
            image.shape[1], image.shape[2], part.height, part.width
        )));
    }
    let n = part.n_tiles;
    if n > MAX_PLAYERS {
        return Err(Error::TooManyPlayers(n, MAX_PLAYERS));
    }
    let k = model.num_classes();
    let total = 1usize << n;
    let (c, h, w) = (image.shape[0], image.shape[1], image.shape[2]);
    let batch = 64usize;

    let masks: Vec<usize> = (0..total).collect();
    let chunks: Vec<(usize, Vec<f64>)> = masks
        .par_chunks(batch)
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * c * h * w);
            for &m in chunk {
                data.extend_from_slice(&composite(image, background, part, m as u32).data);
            }
            let b = Tensor::new(vec![chunk.len(), c, h, w], data);
            let out = model.forward_eval(&b)?;
            Ok((chunk[0], out.data))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_class = vec![vec![0.0; total]; k];
    for (start, logits) in chunks {
        for (row, chunk_logits) in logits.chunks_exact(k).enumerate() {
            for (cls, &v) in chunk_logits.iter().enumerate() {
                per_class[cls][start + row] = v;
            }
        }
    }
    per_class
        .into_iter()
        .map(|values| CoalitionGame::new(n, values))
        .collect()
}

/// Spreads per-tile Shapley values uniformly over their pixels,
/// giving an [H, W] map whose sum equals the sum of the tile values.
pub fn expand_to_pixels(part: &SuperpixelPartition, phi: &[f64]) -> Result<Tensor> {
    if phi.len() != part.n_tiles {
        return Err(Error::DimMismatch(format!(
            "{} values for {} tiles",
            phi.len(),
            part.n_tiles
        )));
    }
    let sizes = part.tile_sizes();
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::EmptySet("partition has an empty tile"));
    }
    let data = part
        .assignment
        .iter()
        .map(|&t| phi[t] / sizes[t] as f64)
        .collect();
    Ok(Tensor::new(vec![part.height, part.width], data))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionReport {
    /// Class with the largest logit on the full image.
    pub winning_class: usize,
    /// v(empty set) per class: the logit on the pure background composite.
    pub expected_values: Vec<f64>,
    /// v(grand coalition) per class: the logit on the unmasked image.
    pub full_values: Vec<f64>,
    /// shapley[class][tile]
    pub shapley: Vec<Vec<f64>>,
    /// Per-pixel expansion for the winning class.
    pub pixel_map: Tensor,
    pub partition: SuperpixelPartition,
}

/// Exact Shapley attribution of every class logit over grid superpixels.
pub fn attribute(
    model: &Model,
    image: &Tensor,
    background: &Tensor,
    part: &SuperpixelPartition,
) -> Result<AttributionReport> {
    let games = model_game_all_classes(model, image, background, part)?;
    let expected_values: Vec<f64> = games.iter().map(|g| g.empty_value()).collect();
    let full_values: Vec<f64> = games.iter().map(|g| g.grand_value()).collect();
    let winning_class = full_values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    let shapley: Vec<Vec<f64>> = games
        .iter()
        .map(exact_shapley)
        .collect::<Result<Vec<_>>>()?;
    let pixel_map = expand_to_pixels(part, &shapley[winning_class])?;
    Ok(AttributionReport {
        winning_class,
        expected_values,
        full_values,
        shapley,
        pixel_map,
        partition: part.clone(),
    })
}

/// Signed contribution totals for one region of a pixel map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSums {
    pub positive: f64,
    pub negative: f64,
    /// positive + negative, i.e. the plain sum over the region.
    pub diff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FgBgSums {
    pub foreground: RegionSums,
    pub background: RegionSums,
}

fn region_sums<'a, I: Iterator<Item = &'a f64>>(vals: I) -> RegionSums {
    let mut positive = 0.0;
    let mut negative = 0.0;
    for &v in vals {
        if v > 0.0 {
            positive += v;
        } else {
            negative += v;
        }
    }
    RegionSums {
        positive,
        negative,
        diff: positive + negative,
    }
}

/// Splits a per-pixel contribution map into foreground and background
/// totals using a segmentation mask of the same dimensions.
pub fn quantify_fg_bg(map: &Tensor, mask: &SegmentationMask) -> Result<FgBgSums> {
    if map.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected [H,W] map, got {:?}",
            map.shape
        )));
    }
    if map.shape[0] != mask.height || map.shape[1] != mask.width {
        return Err(Error::DimMismatch(format!(
            "map is {}x{} but mask is {}x{}",
            map.shape[0], map.shape[1], mask.height, mask.width
        )));
    }
    mask.validate()?;
    let fg = region_sums(
        map.data
            .iter()
            .zip(&mask.foreground)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v),
    );
    let bg = region_sums(
        map.data
            .iter()
            .zip(&mask.foreground)
            .filter(|(_, &m)| !m)
            .map(|(v, _)| v),
    );
    Ok(FgBgSums {
        foreground: fg,
        background: bg,
    })
}

/// a / b, or None when b is zero (reported downstream as N/A).
pub fn ratio(a: f64, b: f64) -> Option<f64> {
    if b == 0.0 {
        None
    } else {
        Some(a / b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContributionRatios {
    /// foreground total of the first map over the second's.
    pub fg_ratio: Option<f64>,
    /// background total of the first map over the second's.
    pub bg_ratio: Option<f64>,
    /// fg_ratio / bg_ratio.
    pub combined: Option<f64>,
}

pub fn contribution_ratios(first: &FgBgSums, second: &FgBgSums) -> ContributionRatios {
    let fg_ratio = ratio(first.foreground.diff, second.foreground.diff);
    let bg_ratio = ratio(first.background.diff, second.background.diff);
    let combined = match (fg_ratio, bg_ratio) {
        (Some(f), Some(b)) => ratio(f, b),
        _ => None,
    };
    ContributionRatios {
        fg_ratio,
        bg_ratio,
        combined,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_student_for;

    fn three_player_game() -> CoalitionGame {
        // bit0 = A, bit1 = B, bit2 = C
        let mut v = vec![0.0; 8];
        v[0b001] = 5.0;
        v[0b010] = 7.0;
        v[0b100] = 3.0;
        v[0b011] = 15.0;
        v[0b101] = 10.0;
        v[0b110] = 13.0;
        v[0b111] = 21.0;
        CoalitionGame::new(3, v).unwrap()
    }

    #[test]
    fn shapley_three_player_oracle() {
        let phi = exact_shapley(&three_player_game()).unwrap();
        assert!((phi[0] - 41.0 / 6.0).abs() < 1e-12); // 6.8333
        assert!((phi[1] - 28.0 / 3.0).abs() < 1e-12); // 9.3333
        assert!((phi[2] - 29.0 / 6.0).abs() < 1e-12); // 4.8333
        let total: f64 = phi.iter().sum();
        assert!((total - 21.0).abs() < 1e-12);
    }

    #[test]
    fn shapley_additive_game_recovers_weights() {
        let w = [2.0, -1.5, 0.25, 4.0];
        let game = CoalitionGame::from_fn(4, |m| {
            (0..4).filter(|i| m >> i & 1 == 1).map(|i| w[i]).sum()
        })
        .unwrap();
        let phi = exact_shapley(&game).unwrap();
        for (p, e) in phi.iter().zip(&w) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn shapley_dummy_and_symmetry() {
        // v depends only on players 0 and 1, symmetrically; player 2 is a dummy
        let game =
            CoalitionGame::from_fn(3, |m| ((m & 1) + (m >> 1 & 1)) as f64 * 3.0).unwrap();
        let phi = exact_shapley(&game).unwrap();
        assert!((phi[0] - phi[1]).abs() < 1e-12);
        assert!(phi[2].abs() < 1e-12);
    }

    #[test]
    fn shapley_efficiency_random_games() {
        let mut rng = SplitMix64::new(99);
        for n in 1..=8 {
            let game =
                CoalitionGame::from_fn(n, |_| rng.uniform(-10.0, 10.0)).unwrap();
            let phi = exact_shapley(&game).unwrap();
            let total: f64 = phi.iter().sum();
            assert!(
                (total - (game.grand_value() - game.empty_value())).abs() < 1e-9,
                "n={n}"
            );
        }
    }

    #[test]
    fn monte_carlo_matches_exact_within_three_se() {
        let game = three_player_game();
        let exact = exact_shapley(&game).unwrap();
        let (mc, se) = monte_carlo_shapley(&game, 2000, 11).unwrap();
        for i in 0..3 {
            assert!(
                (mc[i] - exact[i]).abs() <= 3.0 * se[i].max(1e-12),
                "player {i}: mc {} exact {} se {}",
                mc[i],
                exact[i],
                se[i]
            );
        }
    }

    #[test]
    fn too_many_players_rejected() {
        assert!(matches!(
            CoalitionGame::new(21, vec![]),
            Err(Error::TooManyPlayers(21, 20))
        ));
        assert!(grid_partition(224, 224, 5, 5).is_err());
    }

    #[test]
    fn grid_partition_even_tiles() {
        let p = grid_partition(224, 224, 4, 4).unwrap();
        assert_eq!(p.n_tiles, 16);
        let sizes = p.tile_sizes();
        assert!(sizes.iter().all(|&s| s == 56 * 56));
        // corner tile membership
        assert_eq!(p.assignment[0], 0);
        assert_eq!(p.assignment[223 * 224 + 223], 15);
    }

    #[test]
    fn grid_partition_uneven_tiles() {
        let p = grid_partition(5, 5, 2, 2).unwrap();
        let sizes = p.tile_sizes();
        assert_eq!(sizes, vec![9, 6, 6, 4]); // {3,2} x {3,2}
        let max = *sizes.iter().max().unwrap();
        // row/col splits differ by at most one pixel
        assert_eq!(axis_boundaries(5, 2), vec![0, 3, 5]);
        assert!(max <= 9);
    }

    #[test]
    fn pixel_expansion_conserves_mass() {
        let p = grid_partition(6, 6, 2, 2).unwrap();
        let phi = [1.0, -2.0, 0.5, 3.0];
        let map = expand_to_pixels(&p, &phi).unwrap();
        let sum: f64 = map.data.iter().sum();
        assert!((sum - 2.5).abs() < 1e-12);
        assert_eq!(map.data[0], 1.0 / 9.0);
    }

    #[test]
    fn model_attribution_is_efficient_per_class() {
        let side = 8;
        let model = build_student_for(side, 3, 4);
        let mut rng = SplitMix64::new(5);
        let image = Tensor::new(
            vec![3, side, side],
            (0..3 * side * side).map(|_| rng.uniform(0.0, 1.0)).collect(),
        );
        let background = Tensor::zeros(vec![3, side, side]);
        let part = grid_partition(side, side, 2, 2).unwrap();
        let report = attribute(&model, &image, &background, &part).unwrap();
        for cls in 0..3 {
            let total: f64 = report.shapley[cls].iter().sum();
            let expect = report.full_values[cls] - report.expected_values[cls];
            assert!((total - expect).abs() < 1e-9, "class {cls}");
        }
        // pixel map belongs to the winning class and conserves its mass
        let map_sum: f64 = report.pixel_map.data.iter().sum();
        let w = report.winning_class;
        let phi_sum: f64 = report.shapley[w].iter().sum();
        assert!((map_sum - phi_sum).abs() < 1e-9);
    }

    #[test]
    fn game_values_match_direct_forward() {
        let side = 8;
        let model = build_student_for(side, 2, 7);
        let mut rng = SplitMix64::new(6);
        let image = Tensor::new(
            vec![3, side, side],
            (0..3 * side * side).map(|_| rng.uniform(0.0, 1.0)).collect(),
        );
        let background = Tensor::filled(vec![3, side, side], 0.5);
        let part = grid_partition(side, side, 1, 2).unwrap();
        let games = model_game_all_classes(&model, &image, &background, &part).unwrap();
        // empty coalition = pure background, grand coalition = original image
        let bg_batch = Tensor::new(vec![1, 3, side, side], background.data.clone());
        let im_batch = Tensor::new(vec![1, 3, side, side], image.data.clone());
        let bg_out = model.forward_eval(&bg_batch).unwrap();
        let im_out = model.forward_eval(&im_batch).unwrap();
        for cls in 0..2 {
            assert_eq!(games[cls].empty_value().to_bits(), bg_out.data[cls].to_bits());
            assert_eq!(games[cls].grand_value().to_bits(), im_out.data[cls].to_bits());
        }
    }

    #[test]
    fn quantify_hand_example() {
        // map [[1,-2],[3,0]], foreground = left column
        let map = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.0]);
        let mask = SegmentationMask {
            width: 2,
            height: 2,
            foreground: vec![true, false, true, false],
            polygons: vec![],
        };
        let s = quantify_fg_bg(&map, &mask).unwrap();
        assert_eq!(s.foreground.positive, 4.0);
        assert_eq!(s.foreground.negative, 0.0);
        assert_eq!(s.foreground.diff, 4.0);
        assert_eq!(s.background.positive, 0.0);
        assert_eq!(s.background.negative, -2.0);
        assert_eq!(s.background.diff, -2.0);
    }

    #[test]
    fn quantify_dim_mismatch() {
        let map = Tensor::new(vec![2, 3], vec![0.0; 6]);
        let mask = SegmentationMask {
            width: 2,
            height: 2,
            foreground: vec![true, false, true, false],
            polygons: vec![],
        };
        assert!(matches!(
            quantify_fg_bg(&map, &mask),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn ratio_table_rows() {
        // airplane: fg 284 vs 1509, bg -816 vs 166
        let a = FgBgSums {
            foreground: RegionSums { positive: 284.0, negative: 0.0, diff: 284.0 },
            background: RegionSums { positive: 0.0, negative: -816.0, diff: -816.0 },
        };
        let b = FgBgSums {
            foreground: RegionSums { positive: 1509.0, negative: 0.0, diff: 1509.0 },
            background: RegionSums { positive: 166.0, negative: 0.0, diff: 166.0 },
        };
        let r = contribution_ratios(&a, &b);
        assert!((r.fg_ratio.unwrap() - 0.19).abs() < 0.005);
        assert!((r.bg_ratio.unwrap() - (-4.92)).abs() < 0.005);
        assert!((r.combined.unwrap() - (-0.04)).abs() < 0.005);
        // zero denominators map to None
        assert_eq!(ratio(1.0, 0.0), None);
    }
}
