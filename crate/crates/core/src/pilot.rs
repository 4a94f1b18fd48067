//! IRS training phase matrices, activation patterns and the LS design objective.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::ComplexMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Construction {
    Dft,
    Hadamard,
    RandomUnimodular,
    Quantized(u32),
    Identity,
}

/// IRS training matrix: one column per training slot, one row per element.
/// Entries have magnitude exactly 1, or 0 on rows of deactivated elements.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMatrix {
    matrix: ComplexMatrix,
    construction: Construction,
}

impl PhaseMatrix {
    pub fn new(matrix: ComplexMatrix, construction: Construction) -> Result<Self> {
        for z in matrix.entries() {
            let mag = z.norm();
            if mag != 0.0 && (mag - 1.0).abs() > 1e-12 {
                return Err(Error::Precondition(format!(
                    "phase matrix entries must have magnitude 0 or 1, found {mag}"
                )));
            }
        }
        Ok(Self { matrix, construction })
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn construction(&self) -> Construction {
        self.construction
    }

    /// IRS elements (rows).
    pub fn m(&self) -> usize {
        self.matrix.rows()
    }

    /// Training slots (columns).
    pub fn b(&self) -> usize {
        self.matrix.cols()
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: ComplexMatrix::identity(n),
            construction: Construction::Identity,
        }
    }
}

/// `exp(-j 2 pi i k / n)`.
pub fn dft_matrix(n: usize) -> Result<PhaseMatrix> {
    if n == 0 {
        return Err(Error::Precondition("dft order must be at least 1".into()));
    }
    let matrix = ComplexMatrix::from_fn(n, n, |i, k| {
        // reduce the exponent first so phases stay exact for large i*k
        let e = (i * k) % n;
        Complex64::from_polar(1.0, -2.0 * PI * e as f64 / n as f64)
    });
    Ok(PhaseMatrix {
        matrix,
        construction: Construction::Dft,
    })
}

/// Sylvester construction; `n` must be a power of two.
pub fn hadamard_matrix(n: usize) -> Result<PhaseMatrix> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::UnsupportedOrder(n));
    }
    let matrix = ComplexMatrix::from_fn(n, n, |i, k| {
        let sign = if (i & k).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
        Complex64::new(sign, 0.0)
    });
    Ok(PhaseMatrix {
        matrix,
        construction: Construction::Hadamard,
    })
}

/// I.i.d. phases uniform on `[0, 2 pi)`.
pub fn random_unimodular<R: Rng + ?Sized>(m: usize, b: usize, rng: &mut R) -> Result<PhaseMatrix> {
    if m == 0 || b == 0 {
        return Err(Error::Precondition("random design needs m, b >= 1".into()));
    }
    let matrix = ComplexMatrix::from_fn(m, b, |_, _| Complex64::from_polar(1.0, 2.0 * PI * rng.random::<f64>()));
    Ok(PhaseMatrix {
        matrix,
        construction: Construction::RandomUnimodular,
    })
}

/// Snaps every non-zero phase to the nearest of `2^bits` uniform levels.
pub fn quantize_phases(psi: &PhaseMatrix, bits: u32) -> Result<PhaseMatrix> {
    if bits == 0 || bits > 30 {
        return Err(Error::Precondition(format!(
            "quantizer bits must be in 1..=30, got {bits}"
        )));
    }
    let levels = (1u64 << bits) as f64;
    let step = 2.0 * PI / levels;
    let mut matrix = psi.matrix.clone();
    for z in matrix.entries_mut() {
        let mag = z.norm();
        if mag == 0.0 {
            continue;
        }
        let level = (z.arg() / step).round().rem_euclid(levels);
        let quarter = level * 4.0 / levels;
        // points on the axes are written exactly
        *z = if quarter.fract() == 0.0 {
            match quarter as u64 {
                0 => Complex64::new(mag, 0.0),
                1 => Complex64::new(0.0, mag),
                2 => Complex64::new(-mag, 0.0),
                _ => Complex64::new(0.0, -mag),
            }
        } else {
            Complex64::from_polar(mag, level * step)
        };
    }
    Ok(PhaseMatrix {
        matrix,
        construction: Construction::Quantized(bits),
    })
}

/// `N_t * sigma_n^2 * tr{(Psi Psi^H)^-1}`.
pub fn ls_mse_objective(psi: &ComplexMatrix, n_t: usize, sigma_n2: f64) -> Result<f64> {
    let inv = psi.gram().hermitian_inverse()?;
    Ok(n_t as f64 * sigma_n2 * inv.trace().re)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatternKind {
    Column,
    Row,
    Random,
    Proposed,
}

impl PatternKind {
    pub const ALL: [PatternKind; 4] = [Self::Column, Self::Row, Self::Random, Self::Proposed];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Column => "column",
            Self::Row => "row",
            Self::Random => "random",
            Self::Proposed => "proposed",
        }
    }
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "column" => Ok(Self::Column),
            "row" => Ok(Self::Row),
            "random" => Ok(Self::Random),
            "proposed" => Ok(Self::Proposed),
            other => Err(Error::Config(format!("unknown pattern kind `{other}`"))),
        }
    }
}

/// Which IRS elements reflect during training. Element `(r, c)` has flat
/// index `r * cols + c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationPattern {
    rows: usize,
    cols: usize,
    mask: Vec<bool>,
    kind: PatternKind,
}

impl ActivationPattern {
    pub fn from_mask(rows: usize, cols: usize, mask: Vec<bool>, kind: PatternKind) -> Result<Self> {
        if rows * cols != mask.len() || mask.is_empty() {
            return Err(Error::Dimension(format!(
                "mask of {} entries for a {rows}x{cols} grid",
                mask.len()
            )));
        }
        if !mask.iter().any(|&a| a) {
            return Err(Error::Precondition("pattern must activate at least one element".into()));
        }
        Ok(Self { rows, cols, mask, kind })
    }

    pub fn all_active(rows: usize, cols: usize, kind: PatternKind) -> Self {
        Self {
            rows,
            cols,
            mask: vec![true; rows * cols],
            kind,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn m(&self) -> usize {
        self.mask.len()
    }

    /// Number of active elements.
    pub fn b(&self) -> usize {
        self.mask.iter().filter(|&&a| a).count()
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_active(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.cols + col]
    }

    /// Active element indices in ascending order.
    pub fn active_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| i)
            .collect()
    }

    /// `# pattern kind=<kind> b=<B>` followed by `row,col,active` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("# pattern kind={} b={}\n", self.kind, self.b());
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push_str(&format!("{r},{c},{}\n", u8::from(self.is_active(r, c))));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty pattern file".into()))?;
        let rest = header
            .strip_prefix("# pattern ")
            .ok_or_else(|| Error::Format(format!("bad pattern header `{header}`")))?;
        let mut kind = None;
        let mut b = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("kind", v)) => kind = Some(v.parse::<PatternKind>()?),
                Some(("b", v)) => b = Some(v.parse::<usize>().map_err(|e| Error::Format(e.to_string()))?),
                _ => return Err(Error::Format(format!("bad header field `{field}`"))),
            }
        }
        let kind = kind.ok_or_else(|| Error::Format("header lacks kind".into()))?;
        let mut cells = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Format(format!("`{line}`: {e}")))
            };
            if parts.len() != 3 {
                return Err(Error::Format(format!("bad pattern line `{line}`")));
            }
            let active = match parts[2].trim() {
                "0" => false,
                "1" => true,
                other => return Err(Error::Format(format!("bad active flag `{other}`"))),
            };
            cells.push((parse(parts[0])?, parse(parts[1])?, active));
        }
        let rows = cells.iter().map(|c| c.0).max().map_or(0, |r| r + 1);
        let cols = cells.iter().map(|c| c.1).max().map_or(0, |c| c + 1);
        if rows * cols != cells.len() {
            return Err(Error::Format("pattern cells do not cover a full grid".into()));
        }
        let mut mask = vec![false; rows * cols];
        for (r, c, a) in cells {
            mask[r * cols + c] = a;
        }
        let p = Self::from_mask(rows, cols, mask, kind)?;
        if let Some(b) = b {
            if b != p.b() {
                return Err(Error::Format(format!("header says b={b}, mask has {}", p.b())));
            }
        }
        Ok(p)
    }
}

/// Builds an activation pattern with exactly `b` active elements.
///
/// * `column`: the first `b / rows` columns.
/// * `row`: the first `b / cols` rows.
/// * `random`: `b` elements uniformly without replacement.
/// * `proposed`: column 0 fully active; the remaining `r = b - rows`
///   elements go one per row (`i % rows`) in round-robin column order over
///   columns `1..cols`. With fewer extras than free columns the stride is
///   `(cols - 1) / r` so they spread across the width. A taken slot moves
///   to the next free column of that row.
pub fn make_pattern<R: Rng + ?Sized>(
    kind: PatternKind,
    rows: usize,
    cols: usize,
    b: usize,
    rng: &mut R,
) -> Result<ActivationPattern> {
    let m = rows * cols;
    if rows == 0 || cols == 0 {
        return Err(Error::Precondition("grid must be non-empty".into()));
    }
    if b == 0 || b > m {
        return Err(Error::Precondition(format!("b = {b} outside 1..={m}")));
    }
    let mut mask = vec![false; m];
    match kind {
        PatternKind::Column => {
            if !b.is_multiple_of(rows) {
                return Err(Error::Precondition(format!(
                    "column pattern needs b divisible by {rows}, got {b}"
                )));
            }
            for c in 0..b / rows {
                for r in 0..rows {
                    mask[r * cols + c] = true;
                }
            }
        }
        PatternKind::Row => {
            if !b.is_multiple_of(cols) {
                return Err(Error::Precondition(format!(
                    "row pattern needs b divisible by {cols}, got {b}"
                )));
            }
            mask[..b].iter_mut().for_each(|a| *a = true);
        }
        PatternKind::Random => {
            for i in rand::seq::index::sample(rng, m, b) {
                mask[i] = true;
            }
        }
        PatternKind::Proposed => {
            if b < rows {
                return Err(Error::Precondition(format!(
                    "proposed pattern keeps a full column, so b must be at least {rows}, got {b}"
                )));
            }
            for r in 0..rows {
                mask[r * cols] = true;
            }
            let extra = b - rows;
            let free = cols - 1;
            for i in 0..extra {
                let r = i % rows;
                let start = if extra <= free { i * free / extra } else { i % free };
                // a row holds at most `free` extras, so a free slot exists
                let c = (0..free)
                    .map(|k| 1 + (start + k) % free)
                    .find(|&c| !mask[r * cols + c])
                    .expect("row has a free column");
                mask[r * cols + c] = true;
            }
        }
    }
    ActivationPattern::from_mask(rows, cols, mask, kind)
}

/// Embeds a `b x b` design into an `M x b` matrix whose active rows carry the
/// base rows in ascending element order and whose inactive rows are zero.
pub fn reduce_psi(base: &PhaseMatrix, pattern: &ActivationPattern) -> Result<PhaseMatrix> {
    let b = pattern.b();
    if base.m() != b || base.b() != b {
        return Err(Error::Dimension(format!(
            "base design is {}x{}, pattern activates {b} elements",
            base.m(),
            base.b()
        )));
    }
    let mut out = ComplexMatrix::zeros(pattern.m(), b);
    for (src, dst) in pattern.active_indices().into_iter().enumerate() {
        for c in 0..b {
            out[(dst, c)] = base.matrix[(src, c)];
        }
    }
    Ok(PhaseMatrix {
        matrix: out,
        construction: base.construction,
    })
}

/// Inverse of [`reduce_psi`]: keeps only the active rows.
pub fn compress_rows(full: &PhaseMatrix, pattern: &ActivationPattern) -> Result<PhaseMatrix> {
    if full.m() != pattern.m() {
        return Err(Error::Dimension(format!(
            "design has {} rows, pattern has {} elements",
            full.m(),
            pattern.m()
        )));
    }
    let active = pattern.active_indices();
    let matrix = ComplexMatrix::from_fn(active.len(), full.b(), |r, c| full.matrix[(active[r], c)]);
    Ok(PhaseMatrix {
        matrix,
        construction: full.construction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn dft2_is_exact() {
        let d = dft_matrix(2).unwrap();
        let m = d.matrix();
        assert_eq!(m[(0, 0)], Complex64::new(1.0, 0.0));
        assert_eq!(m[(0, 1)], Complex64::new(1.0, 0.0));
        assert_eq!(m[(1, 0)], Complex64::new(1.0, 0.0));
        assert!((m[(1, 1)] - Complex64::new(-1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn dft4_gram_is_scaled_identity() {
        let g = dft_matrix(4).unwrap().matrix().gram();
        assert!(g.max_abs_diff(&ComplexMatrix::identity(4).scale(Complex64::new(4.0, 0.0))) < 1e-12);
    }

    #[test]
    fn hadamard_examples() {
        assert_eq!(hadamard_matrix(1).unwrap().matrix()[(0, 0)], Complex64::new(1.0, 0.0));
        let h = hadamard_matrix(4).unwrap();
        let g = h.matrix().gram();
        assert_eq!(g, ComplexMatrix::identity(4).scale(Complex64::new(4.0, 0.0)));
        assert!(matches!(hadamard_matrix(12), Err(Error::UnsupportedOrder(12))));
    }

    #[test]
    fn random_design_is_unimodular() {
        let p = random_unimodular(6, 5, &mut rng()).unwrap();
        assert!(p.matrix().entries().iter().all(|z| (z.norm() - 1.0).abs() < 1e-15));
        let one = random_unimodular(1, 1, &mut rng()).unwrap();
        assert!((ls_mse_objective(one.matrix(), 1, 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quantization_examples() {
        let h = hadamard_matrix(8).unwrap();
        for bits in 1..5 {
            assert_eq!(quantize_phases(&h, bits).unwrap().matrix(), h.matrix());
        }
        let q = quantize_phases(&dft_matrix(4).unwrap(), 1).unwrap();
        for z in q.matrix().entries() {
            assert!(*z == Complex64::new(1.0, 0.0) || *z == Complex64::new(-1.0, 0.0), "{z}");
        }
        assert!(quantize_phases(&h, 0).is_err());
    }

    #[test]
    fn objective_of_identity() {
        let j = ls_mse_objective(PhaseMatrix::identity(6).matrix(), 4, 0.5).unwrap();
        assert!((j - 4.0 * 0.5 * 6.0).abs() < 1e-12);
    }

    #[test]
    fn singular_design_is_rejected() {
        let p = ComplexMatrix::from_fn(2, 2, |_, _| Complex64::new(1.0, 0.0));
        assert!(matches!(ls_mse_objective(&p, 1, 1.0), Err(Error::Singular(_))));
    }

    #[test]
    fn proposed_12x12_structure() {
        let p = make_pattern(PatternKind::Proposed, 12, 12, 24, &mut rng()).unwrap();
        assert_eq!(p.b(), 24);
        assert!((0..12).all(|r| p.is_active(r, 0)));
        let mut per_col = [0usize; 12];
        for r in 0..12 {
            let extra: Vec<usize> = (1..12).filter(|&c| p.is_active(r, c)).collect();
            assert_eq!(extra.len(), 1, "row {r}");
            per_col[extra[0]] += 1;
        }
        // 12 extra elements over 11 columns: as even as possible
        assert!(per_col[1..].iter().all(|&n| (1..=2).contains(&n)));
        assert_eq!(per_col[1..].iter().filter(|&&n| n == 2).count(), 1);
    }

    #[test]
    fn proposed_small_grid_spreads_extras() {
        let p = make_pattern(PatternKind::Proposed, 4, 4, 8, &mut rng()).unwrap();
        assert!((0..4).all(|r| p.is_active(r, 0)));
        for r in 0..4 {
            assert_eq!((1..4).filter(|&c| p.is_active(r, c)).count(), 1);
        }
        for c in 1..4 {
            assert!((0..4).any(|r| p.is_active(r, c)), "column {c} empty");
        }
        // round-robin: rows 0..4 take columns 1, 2, 3, 1
        assert_eq!(p.active_indices(), vec![0, 1, 4, 6, 8, 11, 12, 13]);
        assert!(make_pattern(PatternKind::Proposed, 4, 4, 3, &mut rng()).is_err());
        // collisions fall through to the next free column
        let dense = make_pattern(PatternKind::Proposed, 4, 3, 12, &mut rng()).unwrap();
        assert_eq!(dense.b(), 12);
        let sparse = make_pattern(PatternKind::Proposed, 3, 10, 6, &mut rng()).unwrap();
        assert_eq!(sparse.active_indices(), vec![0, 1, 10, 14, 20, 27]);
    }

    #[test]
    fn every_kind_has_b_active_and_full_b_is_all_active() {
        for kind in PatternKind::ALL {
            for b in [4, 8, 12, 16] {
                let p = make_pattern(kind, 4, 4, b, &mut rng()).unwrap();
                assert_eq!(p.b(), b, "{kind} {b}");
            }
            assert!(make_pattern(kind, 4, 4, 16, &mut rng())
                .unwrap()
                .mask()
                .iter()
                .all(|&a| a));
            assert!(make_pattern(kind, 4, 4, 0, &mut rng()).is_err());
            assert!(make_pattern(kind, 4, 4, 17, &mut rng()).is_err());
        }
        assert!(make_pattern(PatternKind::Column, 4, 4, 6, &mut rng()).is_err());
    }

    #[test]
    fn column_and_row_layouts() {
        let c = make_pattern(PatternKind::Column, 3, 4, 6, &mut rng()).unwrap();
        assert_eq!(c.active_indices(), vec![0, 1, 4, 5, 8, 9]);
        let r = make_pattern(PatternKind::Row, 3, 4, 8, &mut rng()).unwrap();
        assert_eq!(r.active_indices(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn non_random_kinds_are_deterministic_random_is_seeded() {
        let a = make_pattern(PatternKind::Proposed, 6, 5, 14, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = make_pattern(PatternKind::Proposed, 6, 5, 14, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let r1 = make_pattern(PatternKind::Random, 6, 5, 14, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let r2 = make_pattern(PatternKind::Random, 6, 5, 14, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn reduce_examples() {
        let base = dft_matrix(16).unwrap();
        let all = ActivationPattern::all_active(4, 4, PatternKind::Column);
        assert_eq!(reduce_psi(&base, &all).unwrap().matrix(), base.matrix());

        let mut mask = vec![false; 6];
        mask[4] = true;
        let single = ActivationPattern::from_mask(2, 3, mask, PatternKind::Random).unwrap();
        let red = reduce_psi(&PhaseMatrix::identity(1), &single).unwrap();
        assert_eq!(red.matrix().frobenius_norm_sq(), 1.0);
        assert_eq!(red.matrix()[(4, 0)], Complex64::new(1.0, 0.0));

        let p = make_pattern(PatternKind::Proposed, 4, 4, 8, &mut rng()).unwrap();
        let base = dft_matrix(8).unwrap();
        let red = reduce_psi(&base, &p).unwrap();
        assert_eq!(compress_rows(&red, &p).unwrap().matrix(), base.matrix());
        assert!(reduce_psi(&dft_matrix(7).unwrap(), &p).is_err());
    }

    #[test]
    fn pattern_text_round_trip() {
        let p = make_pattern(PatternKind::Random, 3, 5, 7, &mut rng()).unwrap();
        let text = p.to_text();
        assert!(text.starts_with("# pattern kind=random b=7\n0,0,"));
        assert_eq!(text.lines().count(), 16);
        assert_eq!(ActivationPattern::from_text(&text).unwrap(), p);
        assert!(ActivationPattern::from_text("# pattern kind=row b=2\n0,0,1\n").is_err());
    }
}
