//! Lip, expression and pose masks on the latent grid, derived from landmark
//! bounding boxes:
//!
//! ```text
//! M_lip  = Y_lip
//! M_exp  = (1 − M_lip) ⊙ Y_exp
//! M_pose = 1 − M_exp
//! ```
//!
//! Note that `M_pose` covers the lip cells as well, so the three masks do not
//! partition the grid.
//!
//! # Landmark files
//!
//! A small text format, one `key = value` entry per line, `#` starts a comment:
//!
//! ```text
//! # H W of the source image
//! image_size = 64 64
//! lip = 26,40 38,40 32,44
//! exp = 14,18 50,18 32,48
//! ```
//!
//! Points are `x,y` pixel coordinates separated by whitespace and must lie in
//! `[0, W) × [0, H)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image;
use crate::tensor::{htns, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub lip: Vec<(f64, f64)>,
    pub exp: Vec<(f64, f64)>,
    /// `(H_I, W_I)`
    pub image_size: (usize, usize),
}

impl LandmarkSet {
    pub fn new(lip: Vec<(f64, f64)>, exp: Vec<(f64, f64)>, image_size: (usize, usize)) -> Result<Self> {
        let lm = LandmarkSet { lip, exp, image_size };
        lm.validate()?;
        Ok(lm)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!("image size {h}x{w} must be positive")));
        }
        for (label, pts) in [("lip", &self.lip), ("exp", &self.exp)] {
            if pts.is_empty() {
                return Err(Error::invalid(format!("{label} point list is empty")));
            }
            for &(x, y) in pts.iter() {
                if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) {
                    return Err(Error::CoordinateOutOfRange { x, y, width: w, height: h });
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let pts = |p: &[(f64, f64)]| p.iter().map(|(x, y)| format!("{x},{y}")).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        writeln!(s, "image_size = {} {}", self.image_size.0, self.image_size.1).expect("string write");
        writeln!(s, "lip = {}", pts(&self.lip)).expect("string write");
        writeln!(s, "exp = {}", pts(&self.exp)).expect("string write");
        s
    }
}

/// Parses the landmark text format; `origin` is only used in error messages.
pub fn parse_landmarks(text: &str, origin: &str) -> Result<LandmarkSet> {
    let parse_err = |line: usize, field: &str, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        field: field.to_string(),
        message,
    };
    let mut image_size = None;
    let mut lip = None;
    let mut exp = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, "line", "expected `key = value`".into()))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "image_size" => {
                let dims: Vec<usize> = value
                    .split_whitespace()
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(line_no, key, e.to_string()))?;
                if dims.len() != 2 {
                    return Err(parse_err(line_no, key, format!("expected `H W`, got {} numbers", dims.len())));
                }
                image_size = Some((dims[0], dims[1]));
            }
            "lip" | "exp" => {
                let mut pts = Vec::new();
                for tok in value.split_whitespace() {
                    let (x, y) = tok
                        .split_once(',')
                        .ok_or_else(|| parse_err(line_no, key, format!("point `{tok}` is not `x,y`")))?;
                    let x: f64 = x.trim().parse().map_err(|_| parse_err(line_no, key, format!("bad x in `{tok}`")))?;
                    let y: f64 = y.trim().parse().map_err(|_| parse_err(line_no, key, format!("bad y in `{tok}`")))?;
                    pts.push((x, y));
                }
                if key == "lip" {
                    lip = Some(pts);
                } else {
                    exp = Some(pts);
                }
            }
            other => return Err(parse_err(line_no, other, "unknown key".into())),
        }
    }
    let missing = |f: &str| parse_err(0, f, "missing entry".into());
    LandmarkSet::new(
        lip.ok_or_else(|| missing("lip"))?,
        exp.ok_or_else(|| missing("exp"))?,
        image_size.ok_or_else(|| missing("image_size"))?,
    )
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(&text, &path.display().to_string())
}

pub fn save_landmarks(path: impl AsRef<Path>, lm: &LandmarkSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, lm.to_text()).map_err(|e| Error::io(path, e))
}

/// Binary `[H_z, W_z]` mask of the points' bounding box on the latent grid.
///
/// The box is scaled by `(H_z/H_I, W_z/W_I)`; a cell is set when its centre
/// lies inside the scaled box (boundary inclusive). The cell holding each
/// landmark is always set as well, so a degenerate box still marks the
/// cell it falls in.
pub fn rasterize_box_mask(points: &[(f64, f64)], image_size: (usize, usize), latent: (usize, usize)) -> Result<Tensor> {
    let (hi, wi) = image_size;
    let (hz, wz) = latent;
    if points.is_empty() {
        return Err(Error::invalid("cannot rasterize an empty point list"));
    }
    if hz == 0 || wz == 0 || hi == 0 || wi == 0 {
        return Err(Error::invalid(format!("degenerate grid: latent {hz}x{wz}, image {hi}x{wi}")));
    }
    let sy = hz as f64 / hi as f64;
    let sx = wz as f64 / wi as f64;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (x0, x1, y0, y1) = (x0 * sx, x1 * sx, y0 * sy, y1 * sy);
    let mut m = Tensor::zeros(&[hz, wz]);
    let d = m.data_mut();
    for r in 0..hz {
        let cy = r as f64 + 0.5;
        if cy < y0 || cy > y1 {
            continue;
        }
        for c in 0..wz {
            let cx = c as f64 + 0.5;
            if cx >= x0 && cx <= x1 {
                d[r * wz + c] = 1.0;
            }
        }
    }
    for &(x, y) in points {
        let r = ((y * sy).floor().max(0.0) as usize).min(hz - 1);
        let c = ((x * sx).floor().max(0.0) as usize).min(wz - 1);
        d[r * wz + c] = 1.0;
    }
    Ok(m)
}

/// The raw boxes and the derived lip / expression / pose masks, all `[H, W]`
/// with values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub y_lip: Tensor,
    pub y_exp: Tensor,
    pub m_lip: Tensor,
    pub m_exp: Tensor,
    pub m_pose: Tensor,
}

impl RegionMasks {
    pub fn from_boxes(y_lip: Tensor, y_exp: Tensor) -> Result<Self> {
        if y_lip.rank() != 2 || y_lip.shape() != y_exp.shape() {
            return Err(Error::ShapeMismatch {
                op: "region masks",
                lhs: y_lip.shape().to_vec(),
                rhs: y_exp.shape().to_vec(),
            });
        }
        let m_lip = y_lip.clone();
        let m_exp = y_exp.zip_map(&m_lip, |e, l| (1.0 - l) * e)?;
        let m_pose = m_exp.map(|e| 1.0 - e);
        Ok(RegionMasks {
            y_lip,
            y_exp,
            m_lip,
            m_exp,
            m_pose,
        })
    }

    /// Masks that route everything through the pose branch: `M_pose = 1`,
    /// `M_exp = M_lip = 0`.
    pub fn pose_only(h: usize, w: usize) -> Self {
        RegionMasks {
            y_lip: Tensor::zeros(&[h, w]),
            y_exp: Tensor::zeros(&[h, w]),
            m_lip: Tensor::zeros(&[h, w]),
            m_exp: Tensor::zeros(&[h, w]),
            m_pose: Tensor::ones(&[h, w]),
        }
    }

    /// `(H, W)` of the grid.
    pub fn size(&self) -> (usize, usize) {
        (self.m_lip.shape()[0], self.m_lip.shape()[1])
    }

    /// Max-pools the raw boxes down to `(h, w)` and re-derives the masks, so
    /// every mask invariant still holds at the coarser grid.
    pub fn downsample(&self, h: usize, w: usize) -> Result<Self> {
        let (hz, wz) = self.size();
        if h == 0 || w == 0 || hz % h != 0 || wz % w != 0 {
            return Err(Error::invalid(format!("cannot pool a {hz}x{wz} mask to {h}x{w}")));
        }
        if (h, w) == (hz, wz) {
            return Ok(self.clone());
        }
        let (fy, fx) = (hz / h, wz / w);
        let pool = |m: &Tensor| {
            Tensor::from_fn(&[h, w], |i| {
                let (r, c) = (i / w, i % w);
                let mut v: f64 = 0.0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        v = v.max(m.data()[(r * fy + dy) * wz + c * fx + dx]);
                    }
                }
                v
            })
        };
        RegionMasks::from_boxes(pool(&self.y_lip), pool(&self.y_exp))
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("y_lip", &self.y_lip),
            ("y_exp", &self.y_exp),
            ("m_lip", &self.m_lip),
            ("m_exp", &self.m_exp),
            ("m_pose", &self.m_pose),
        ]
    }

    /// Writes each mask as `<name>.htns`.
    pub fn write_htns(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, m) in self.named() {
            htns::write(dir.join(format!("{name}.htns")), m)?;
        }
        Ok(())
    }

    /// Writes each mask as `<name>.pgm` at image resolution: mask cells are
    /// white, landmark pixels mid-gray.
    pub fn write_overlays(&self, dir: &Path, lm: &LandmarkSet) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (hi, wi) = lm.image_size;
        let (hz, wz) = self.size();
        for (name, m) in self.named() {
            let mut px = vec![0u8; hi * wi];
            for (i, p) in px.iter_mut().enumerate() {
                let (y, x) = (i / wi, i % wi);
                let r = (y * hz / hi).min(hz - 1);
                let c = (x * wz / wi).min(wz - 1);
                if m.data()[r * wz + c] > 0.5 {
                    *p = 255;
                }
            }
            for &(x, y) in lm.lip.iter().chain(&lm.exp) {
                px[(y as usize).min(hi - 1) * wi + (x as usize).min(wi - 1)] = 128;
            }
            image::write_pgm(dir.join(format!("{name}.pgm")), &px, hi, wi)?;
        }
        Ok(())
    }
}

pub fn derive_region_masks(lm: &LandmarkSet, latent: (usize, usize)) -> Result<RegionMasks> {
    lm.validate()?;
    let y_lip = rasterize_box_mask(&lm.lip, lm.image_size, latent)?;
    let y_exp = rasterize_box_mask(&lm.exp, lm.image_size, latent)?;
    RegionMasks::from_boxes(y_lip, y_exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cells(m: &Tensor) -> Vec<(usize, usize)> {
        let w = m.shape()[1];
        m.data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }

    #[test]
    fn rasterize_examples() {
        let m = rasterize_box_mask(&[(5.3, 9.9)], (16, 16), (4, 4)).unwrap();
        assert_eq!(cells(&m), vec![(2, 1)]);

        let m = rasterize_box_mask(&[(0.0, 0.0), (63.0, 63.0)], (64, 64), (16, 16)).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));

        // centres 0.5, 1.5, 2.5, 3.5 against the scaled box [1, 2.75]
        let m = rasterize_box_mask(&[(4.0, 4.0), (11.0, 11.0)], (16, 16), (4, 4)).unwrap();
        assert_eq!(cells(&m), vec![(1, 1), (1, 2), (2, 1), (2, 2)]);

        assert!(rasterize_box_mask(&[], (16, 16), (4, 4)).is_err());
        assert!(rasterize_box_mask(&[(1.0, 1.0)], (16, 16), (0, 4)).is_err());
    }

    #[test]
    fn derive_examples() {
        let exp_all = vec![(0.0, 0.0), (15.0, 15.0)];
        let lm = LandmarkSet::new(vec![(6.0, 6.0)], exp_all, (16, 16)).unwrap();
        let m = derive_region_masks(&lm, (4, 4)).unwrap();
        assert_eq!(cells(&m.m_lip), vec![(1, 1)]);
        assert_eq!(m.m_exp.sum(), 15.0);
        assert_eq!(m.m_exp.get(&[1, 1]), 0.0);
        assert_eq!(cells(&m.m_pose), vec![(1, 1)]);

        let same = vec![(4.0, 4.0), (11.0, 11.0)];
        let lm = LandmarkSet::new(same.clone(), same, (16, 16)).unwrap();
        let m = derive_region_masks(&lm, (4, 4)).unwrap();
        assert_eq!(m.m_exp.sum(), 0.0);
        assert!(m.m_pose.data().iter().all(|&v| v == 1.0));

        // lip box strictly inside the expression box
        let lm = LandmarkSet::new(vec![(6.0, 10.0)], vec![(2.0, 2.0), (14.0, 14.0)], (16, 16)).unwrap();
        let m = derive_region_masks(&lm, (4, 4)).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let exp = m.y_exp.get(&[r, c]);
                let lip = if (r, c) == (2, 1) { 1.0 } else { 0.0 };
                assert_eq!(m.m_exp.get(&[r, c]), exp * (1.0 - lip));
                assert_eq!(m.m_pose.get(&[r, c]), 1.0 - m.m_exp.get(&[r, c]));
            }
        }
    }

    #[test]
    fn parse_and_validate() {
        let text = "# test\nimage_size = 16 32\nlip = 1,2 3,4  # trailing\nexp = 0,0 31.5,15\n";
        let lm = parse_landmarks(text, "mem").unwrap();
        assert_eq!(lm.image_size, (16, 32));
        assert_eq!(lm.lip.len(), 2);
        assert_eq!(lm.exp.len(), 2);
        assert_eq!(parse_landmarks(&lm.to_text(), "again").unwrap(), lm);

        let err = parse_landmarks("image_size = 8 8\nlip = -1,3\nexp = 1,1\n", "f").unwrap_err();
        assert!(matches!(err, Error::CoordinateOutOfRange { .. }), "{err}");
        let err = parse_landmarks("image_size = 8 8\nlip =\nexp = 1,1\n", "f").unwrap_err();
        assert!(err.to_string().contains("lip"), "{err}");
        let err = parse_landmarks("image_size = 8 8\nlip = 1;1\n", "f.txt").unwrap_err();
        assert!(err.to_string().starts_with("f.txt:2: field `lip`"), "{err}");
    }

    #[test]
    fn downsample_keeps_invariants() {
        let lm = LandmarkSet::new(vec![(20.0, 40.0), (40.0, 44.0)], vec![(10.0, 10.0), (54.0, 50.0)], (64, 64)).unwrap();
        let m = derive_region_masks(&lm, (16, 16)).unwrap();
        let d = m.downsample(8, 8).unwrap();
        assert_eq!(d.size(), (8, 8));
        for i in 0..64 {
            let (l, e, p) = (d.m_lip.data()[i], d.m_exp.data()[i], d.m_pose.data()[i]);
            assert_eq!(e * l, 0.0);
            assert_eq!(e + p, 1.0);
        }
        assert!(m.downsample(5, 5).is_err());
    }

    fn point(h: usize, w: usize) -> impl Strategy<Value = (f64, f64)> {
        (0.0..w as f64, 0.0..h as f64)
    }

    proptest! {
        #[test]
        fn adding_points_never_shrinks(
            pts in proptest::collection::vec(point(40, 24), 1..6),
            extra in point(40, 24),
        ) {
            let a = rasterize_box_mask(&pts, (40, 24), (10, 6)).unwrap();
            let mut more = pts.clone();
            more.push(extra);
            let b = rasterize_box_mask(&more, (40, 24), (10, 6)).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(x <= y);
            }
        }

        #[test]
        fn masks_are_reproducible(lip in proptest::collection::vec(point(64, 64), 1..4), exp in proptest::collection::vec(point(64, 64), 1..4)) {
            let lm = LandmarkSet::new(lip, exp, (64, 64)).unwrap();
            let a = derive_region_masks(&lm, (16, 16)).unwrap();
            let b = derive_region_masks(&lm, (16, 16)).unwrap();
            for ((_, x), (_, y)) in a.named().iter().zip(b.named().iter()) {
                prop_assert_eq!(htns::encode(x), htns::encode(y));
            }
        }
    }
}
