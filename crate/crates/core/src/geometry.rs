//! Atom clouds, rigid motions, pocket selection and farthest point sampling.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Positions plus one feature vector per atom.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomCloud {
    positions: Array2<f64>,
    features: Array2<f64>,
    residue_index: Option<Vec<i64>>,
}

impl AtomCloud {
    pub fn new(positions: Array2<f64>, features: Array2<f64>) -> Result<Self> {
        Self::with_residues(positions, features, None)
    }

    pub fn with_residues(
        positions: Array2<f64>,
        features: Array2<f64>,
        residue_index: Option<Vec<i64>>,
    ) -> Result<Self> {
        if positions.ncols() != 3 {
            return Err(Error::shape(format!("positions need 3 columns, got {}", positions.ncols())));
        }
        if positions.nrows() != features.nrows() {
            return Err(Error::shape(format!(
                "{} positions but {} feature rows",
                positions.nrows(),
                features.nrows()
            )));
        }
        if let Some(r) = &residue_index {
            if r.len() != positions.nrows() {
                return Err(Error::shape(format!(
                    "{} residue indices for {} atoms",
                    r.len(),
                    positions.nrows()
                )));
            }
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("atom positions".into()));
        }
        Ok(Self { positions, features, residue_index })
    }

    /// A cloud with zero-width features.
    pub fn from_points(points: &[Vec3]) -> Result<Self> {
        let positions = points_to_array(points);
        let n = positions.nrows();
        Self::new(positions, Array2::zeros((n, 0)))
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self) -> ArrayView2<'_, f64> {
        self.positions.view()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn residue_index(&self) -> Option<&[i64]> {
        self.residue_index.as_deref()
    }

    pub fn position(&self, i: usize) -> Vec3 {
        let r = self.positions.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn into_parts(self) -> (Array2<f64>, Array2<f64>, Option<Vec<i64>>) {
        (self.positions, self.features, self.residue_index)
    }

    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Self::with_residues(self.positions.clone(), features, self.residue_index.clone())
    }

    pub fn with_positions(&self, positions: Array2<f64>) -> Result<Self> {
        Self::with_residues(positions, self.features.clone(), self.residue_index.clone())
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(self.positions.view())
    }

    pub fn translated(&self, offset: Vec3) -> Self {
        let mut out = self.clone();
        for mut row in out.positions.outer_iter_mut() {
            for k in 0..3 {
                row[k] += offset[k];
            }
        }
        out
    }

    /// Sub-cloud of the given atoms, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            positions: self.positions.select(Axis(0), indices),
            features: self.features.select(Axis(0), indices),
            residue_index: self
                .residue_index
                .as_ref()
                .map(|r| indices.iter().map(|&i| r[i]).collect()),
        }
    }
}

pub fn points_to_array(points: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, k)| points[i][k])
}

pub fn centroid(positions: ArrayView2<f64>) -> Vec3 {
    if positions.nrows() == 0 {
        return [0.0; 3];
    }
    let m: Array1<f64> = positions.mean_axis(Axis(0)).expect("nonempty");
    [m[0], m[1], m[2]]
}

#[inline]
pub fn dist2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn dist2_point(a: ArrayView1<f64>, p: &Vec3) -> f64 {
    let dx = a[0] - p[0];
    let dy = a[1] - p[1];
    let dz = a[2] - p[2];
    dx * dx + dy * dy + dz * dz
}

/// An element of E(3): `x -> R x + b` with `R` orthogonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: [[f64; 3]; 3],
    translation: Vec3,
}

impl RigidTransform {
    pub const ORTHOGONALITY_TOL: f64 = 1e-10;

    pub fn new(rotation: [[f64; 3]; 3], translation: Vec3) -> Result<Self> {
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > Self::ORTHOGONALITY_TOL {
                    return Err(Error::invalid(format!(
                        "rotation is not orthogonal: (RᵀR)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        if rotation.iter().flatten().chain(&translation).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rigid transform".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation_only(b: Vec3) -> Self {
        Self { translation: b, ..Self::identity() }
    }

    /// Uniformly random rotation (from a normalized Gaussian quaternion),
    /// optionally composed with a reflection, plus a Gaussian translation of
    /// the given scale.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, reflect: bool, translation_scale: f64) -> Self {
        let mut q: [f64; 4] = [0.0; 4];
        loop {
            for v in q.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-8 {
                q.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
        let [w, x, y, z] = q;
        let mut r = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        if reflect {
            for row in r.iter_mut() {
                row[0] = -row[0];
            }
        }
        let mut t = [0.0; 3];
        for v in t.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *v = g * translation_scale;
        }
        Self { rotation: r, translation: t }
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        let r = self.rotate(p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// Rotates every row of an `n × 3` array (no translation).
    pub fn rotate_rows(&self, v: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(v.raw_dim());
        for (src, mut dst) in v.outer_iter().zip(out.outer_iter_mut()) {
            let r = self.rotate([src[0], src[1], src[2]]);
            dst[0] = r[0];
            dst[1] = r[1];
            dst[2] = r[2];
        }
        out
    }

    /// Applies the full transform to every row of an `n × 3` array.
    pub fn apply_rows(&self, v: ArrayView2<f64>) -> Array2<f64> {
        let mut out = self.rotate_rows(v);
        for mut row in out.outer_iter_mut() {
            for k in 0..3 {
                row[k] += self.translation[k];
            }
        }
        out
    }

    /// The transform `x -> self(first(x))`.
    pub fn after(&self, first: &RigidTransform) -> RigidTransform {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.rotation[i][k] * first.rotation[k][j]).sum();
            }
        }
        let t = self.apply_point(first.translation);
        RigidTransform { rotation: r, translation: t }
    }

    pub fn inverse(&self) -> RigidTransform {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.rotation[j][i];
            }
        }
        let inv = RigidTransform { rotation: r, translation: [0.0; 3] };
        let t = inv.rotate(self.translation);
        RigidTransform { rotation: r, translation: [-t[0], -t[1], -t[2]] }
    }
}

/// Maps positions `x -> R x + b`; features and residue indices are unchanged.
pub fn apply_transform(cloud: &AtomCloud, g: &RigidTransform) -> AtomCloud {
    AtomCloud {
        positions: g.apply_rows(cloud.positions.view()),
        features: cloud.features.clone(),
        residue_index: cloud.residue_index.clone(),
    }
}

/// Greedy max-min subset of `k` atoms. Starts from the atom nearest the
/// centroid; ties go to the lowest index.
pub fn farthest_point_sample(cloud: &AtomCloud, k: usize) -> Result<Vec<usize>> {
    fps_positions(cloud.positions.view(), k)
}

pub(crate) fn fps_positions(positions: ArrayView2<f64>, k: usize) -> Result<Vec<usize>> {
    let n = positions.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("farthest point sampling needs 1 <= k <= {n}, got k={k}")));
    }
    let c = centroid(positions);
    let first = argmin_first(positions.outer_iter().map(|p| dist2_point(p, &c)));
    let mut chosen = Vec::with_capacity(k);
    chosen.push(first);
    let mut min_d: Vec<f64> = positions
        .outer_iter()
        .map(|p| dist2(p, positions.row(first)))
        .collect();
    while chosen.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
        let pb = positions.row(best);
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = dist2(positions.row(i), pb);
            if nd < *d {
                *d = nd;
            }
        }
        min_d[best] = f64::NEG_INFINITY;
    }
    Ok(chosen)
}

fn argmin_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for (i, v) in values.enumerate() {
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Default number of Cα atoms kept around a binding site.
pub const DEFAULT_POCKET_SIZE: usize = 100;

/// Indices of the `count` atoms nearest `site_center`, returned in
/// increasing index order. Ties in distance go to the lower index.
pub fn pocket_indices(receptor: &AtomCloud, site_center: Vec3, count: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = receptor
        .positions
        .outer_iter()
        .enumerate()
        .map(|(i, p)| (dist2_point(p, &site_center), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = order.into_iter().take(count).map(|(_, i)| i).collect();
    keep.sort_unstable();
    keep
}

/// The `count` receptor atoms nearest `site_center`, preserving input order.
pub fn select_pocket(receptor: &AtomCloud, site_center: Vec3, count: usize) -> Result<AtomCloud> {
    if receptor.is_empty() {
        return Err(Error::invalid("receptor is empty"));
    }
    Ok(receptor.select(&pocket_indices(receptor, site_center, count)))
}

/// Translates both clouds so the receptor centroid sits at the origin.
/// Returns the applied offset's negation (the original centroid) so callers
/// can map generated coordinates back.
pub fn center_complex(receptor: &AtomCloud, ligand: &AtomCloud) -> Result<(AtomCloud, AtomCloud, Vec3)> {
    if receptor.is_empty() {
        return Err(Error::invalid("receptor is empty"));
    }
    let c = receptor.centroid();
    let shift = [-c[0], -c[1], -c[2]];
    Ok((receptor.translated(shift), ligand.translated(shift), c))
}

/// Smallest pairwise distance within a point set (infinity for < 2 points).
pub fn min_pairwise_distance(positions: ArrayView2<f64>) -> f64 {
    let n = positions.nrows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            best = best.min(dist2(positions.row(i), positions.row(j)));
        }
    }
    best.sqrt()
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> AtomCloud {
        let pts: Vec<Vec3> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                ]
            })
            .collect();
        AtomCloud::from_points(&pts).unwrap()
    }

    #[test]
    fn identity_transform_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(&mut rng, 10, 5.0);
        assert_eq!(apply_transform(&c, &RigidTransform::identity()), c);
    }

    #[test]
    fn successive_transforms_equal_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_cloud(&mut rng, 12, 5.0);
        let g1 = RigidTransform::random(&mut rng, false, 3.0);
        let g2 = RigidTransform::random(&mut rng, true, 3.0);
        let two = apply_transform(&apply_transform(&c, &g1), &g2);
        let once = apply_transform(&c, &g2.after(&g1));
        for (a, b) in two.positions().iter().zip(once.positions().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_distances_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let c = random_cloud(&mut rng, 15, 8.0);
            let g = RigidTransform::random(&mut rng, trial % 2 == 0, 10.0);
            let t = apply_transform(&c, &g);
            for i in 0..c.len() {
                for j in 0..c.len() {
                    let a = dist2(c.positions().row(i), c.positions().row(j)).sqrt();
                    let b = dist2(t.positions().row(i), t.positions().row(j)).sqrt();
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn random_transforms_are_orthogonal_with_requested_handedness() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for reflect in [false, true] {
            let g = RigidTransform::random(&mut rng, reflect, 1.0);
            RigidTransform::new(*g.rotation(), g.translation()).unwrap();
            let want = if reflect { -1.0 } else { 1.0 };
            assert!((g.determinant() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_undoes_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = RigidTransform::random(&mut rng, true, 4.0);
        let p = [1.0, -2.0, 0.5];
        let back = g.inverse().apply_point(g.apply_point(p));
        for k in 0..3 {
            assert!((back[k] - p[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_orthogonal_rotation_rejected() {
        let r = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(RigidTransform::new(r, [0.0; 3]).is_err());
    }

    #[test]
    fn fps_single_pick_is_centroid_nearest() {
        let pts = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [4.0, 0.5, 0.0], [9.0, 1.0, 0.0]];
        let c = AtomCloud::from_points(&pts).unwrap();
        // centroid (5.75, 0.375, 0) is nearest atom 2
        assert_eq!(farthest_point_sample(&c, 1).unwrap(), vec![2]);
    }

    #[test]
    fn fps_full_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = random_cloud(&mut rng, 17, 3.0);
        let mut idx = farthest_point_sample(&c, 17).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn fps_rejects_bad_k() {
        let c = AtomCloud::from_points(&[[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert!(farthest_point_sample(&c, 3).is_err());
        assert!(farthest_point_sample(&c, 0).is_err());
    }

    #[test]
    fn fps_on_cube_is_within_factor_two_of_best_four_subset() {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push([x, y, z]);
                }
            }
        }
        let c = AtomCloud::from_points(&pts).unwrap();
        let chosen = farthest_point_sample(&c, 4).unwrap();
        let spread = |idx: &[usize]| min_pairwise_distance(c.select(idx).positions());
        // exhaustive oracle over all 70 four-subsets
        let mut best = 0.0f64;
        for a in 0..8 {
            for b in a + 1..8 {
                for cc in b + 1..8 {
                    for d in cc + 1..8 {
                        best = best.max(spread(&[a, b, cc, d]));
                    }
                }
            }
        }
        // the optimum is an inscribed tetrahedron; greedy selection starts at
        // corner 0, jumps to the opposite corner and then can only reach
        // edge-length separation
        assert!((best - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(chosen, vec![0, 7, 1, 2]);
        assert!((spread(&chosen) - 1.0).abs() < 1e-12);
        assert!(spread(&chosen) >= 0.5 * best);
    }

    #[test]
    fn fps_set_invariant_under_reordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let c = random_cloud(&mut rng, 25, 6.0);
            let mut perm: Vec<usize> = (0..25).collect();
            perm.shuffle(&mut rng);
            let shuffled = c.select(&perm);
            let mut a: Vec<usize> = farthest_point_sample(&c, 8).unwrap();
            let mut b: Vec<usize> = farthest_point_sample(&shuffled, 8).unwrap().iter().map(|&i| perm[i]).collect();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fps_spreads_more_than_random_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut fps_total, mut rnd_total) = (0.0, 0.0);
        for _ in 0..100 {
            let c = random_cloud(&mut rng, 40, 5.0);
            let f = farthest_point_sample(&c, 8).unwrap();
            fps_total += min_pairwise_distance(c.select(&f).positions());
            let mut idx: Vec<usize> = (0..40).collect();
            idx.shuffle(&mut rng);
            rnd_total += min_pairwise_distance(c.select(&idx[..8]).positions());
        }
        assert!(fps_total > rnd_total, "fps {fps_total} random {rnd_total}");
    }

    #[test]
    fn pocket_equals_sorted_distance_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random_cloud(&mut rng, 60, 10.0);
        let center = [1.0, -2.0, 0.5];
        let pocket = pocket_indices(&c, center, 20);
        let mut by_dist: Vec<usize> = (0..60).collect();
        by_dist.sort_by(|&a, &b| {
            let da = dist2_point(c.positions().row(a), &center);
            let db = dist2_point(c.positions().row(b), &center);
            da.partial_cmp(&db).unwrap()
        });
        let mut want = by_dist[..20].to_vec();
        want.sort_unstable();
        assert_eq!(pocket, want);
    }

    #[test]
    fn pocket_clamps_to_whole_receptor() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = random_cloud(&mut rng, 30, 4.0);
        let p = select_pocket(&c, [0.0; 3], DEFAULT_POCKET_SIZE).unwrap();
        assert_eq!(p, c);
        assert!(select_pocket(&AtomCloud::from_points(&[]).unwrap(), [0.0; 3], 3).is_err());
    }

    #[test]
    fn pocket_ties_prefer_lower_index() {
        let pts = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 0.0, 0.0]];
        let c = AtomCloud::from_points(&pts).unwrap();
        assert_eq!(pocket_indices(&c, [0.0; 3], 2), vec![0, 1]);
    }

    #[test]
    fn pocket_selection_commutes_with_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = random_cloud(&mut rng, 50, 10.0);
        let center = [0.5, 0.5, -1.0];
        let g = RigidTransform::random(&mut rng, true, 5.0);
        let a = pocket_indices(&c, center, 15);
        let b = pocket_indices(&apply_transform(&c, &g), g.apply_point(center), 15);
        assert_eq!(a, b);
    }

    #[test]
    fn centering_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r = random_cloud(&mut rng, 20, 10.0).translated([30.0, -4.0, 2.0]);
        let l = random_cloud(&mut rng, 5, 2.0).translated([31.0, -3.0, 2.5]);
        let (rc, lc, offset) = center_complex(&r, &l).unwrap();
        assert!(rc.centroid().iter().all(|v| v.abs() < 1e-10));
        let back = lc.translated(offset);
        for (a, b) in back.positions().iter().zip(l.positions().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let (_, _, again) = center_complex(&rc, &lc).unwrap();
        assert!(again.iter().all(|v| v.abs() < 1e-10));
    }
}
