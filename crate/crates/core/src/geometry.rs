//! Box arithmetic, overlap measures, the SIoU regression loss and the affine
//! maps between frame space and crop space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Axis-aligned box: top-left corner plus extent, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Construct without validation. Callers must guarantee `w, h > 0`
    /// before handing the box to any overlap function.
    pub fn new_unchecked(x: T, y: T, w: T, h: T) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Result<Self> {
        let half = lit::<T>(0.5);
        Self::new(cx - half * w, cy - half * h, w, h)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidBox(format!("non-finite coordinates in {}", self.to_line())));
        }
        if self.w <= T::zero() || self.h <= T::zero() {
            return Err(Error::InvalidBox(format!("width and height must be positive, got w={} h={}", self.w, self.h)));
        }
        Ok(())
    }

    pub fn center(&self) -> (T, T) {
        let half = lit::<T>(0.5);
        (self.x + self.w * half, self.y + self.h * half)
    }

    pub fn right(&self) -> T {
        self.x + self.w
    }

    pub fn bottom(&self) -> T {
        self.y + self.h
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    /// Clamp into a `width x height` frame keeping at least `min_side` pixels per side.
    pub fn clamp_to_frame(&self, width: T, height: T, min_side: T) -> Self {
        let clamp_axis = |lo: T, extent: T, limit: T| {
            let side = min_side.min(limit);
            let mut a = lo.max(T::zero()).min(limit - side);
            let mut b = (lo + extent).min(limit).max(a + side);
            if b > limit {
                b = limit;
                a = b - side;
            }
            (a, b - a)
        };
        let (x, w) = clamp_axis(self.x, self.w, width);
        let (y, h) = clamp_axis(self.y, self.h, height);
        Self { x, y, w, h }
    }

    /// GOT-10k style `x,y,w,h` line with two-decimal fixed-point values.
    pub fn to_line(&self) -> String {
        format!("{:.2},{:.2},{:.2},{:.2}", self.x.as_f64(), self.y.as_f64(), self.w.as_f64(), self.h.as_f64())
    }

    /// Parse one `x,y,w,h` annotation line. Returns a human-readable reason on failure.
    pub fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 4 {
            return Err(format!("expected 4 comma-separated values, found {}", fields.len()));
        }
        let mut v = [T::zero(); 4];
        for (slot, (name, raw)) in v.iter_mut().zip(["x", "y", "w", "h"].iter().zip(&fields)) {
            let parsed: f64 = raw.trim().parse().map_err(|_| format!("field {name}={raw:?} is not a number"))?;
            if !parsed.is_finite() {
                return Err(format!("field {name} is not finite"));
            }
            *slot = T::lit(parsed);
        }
        if v[2] <= T::zero() || v[3] <= T::zero() {
            return Err(format!("width and height must be positive (w={}, h={})", fields[2], fields[3]));
        }
        Ok(Self::new_unchecked(v[0], v[1], v[2], v[3]))
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            x: U::lit(self.x.as_f64()),
            y: U::lit(self.y.as_f64()),
            w: U::lit(self.w.as_f64()),
            h: U::lit(self.h.as_f64()),
        }
    }
}

/// Intersection over union. Boxes that only touch along an edge do not overlap.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> Result<T> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(T::zero());
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(T::zero());
    let inter = iw * ih;
    // Rounding in `x + w - x` can push identical boxes a hair above one.
    (inter / (a.area() + b.area() - inter)).min(T::one())
}

/// Shape-cost exponent of SIoU.
pub const SIOU_THETA: i32 = 4;

/// SIoU loss `1 - IoU + (distance + shape) / 2` of `pred` against `gt`.
pub fn siou_loss<T: Scalar>(pred: &BBox<T>, gt: &BBox<T>) -> Result<T> {
    pred.validate()?;
    gt.validate()?;
    Ok(siou_loss_with_grad(pred, gt).0)
}

/// SIoU loss and its gradient with respect to `(x, y, w, h)` of `pred`.
///
/// The angle cost `1 - 2 sin²(arcsin(s) - π/4)` is evaluated in the equivalent
/// algebraic form `2 s sqrt(1 - s²)`, where `s` is the sine of whichever of the
/// two centre-line angles is at most 45°. When the centres coincide the angle
/// cost is taken as zero; the distance cost vanishes there regardless.
pub fn siou_loss_with_grad<T: Scalar>(pred: &BBox<T>, gt: &BBox<T>) -> (T, [T; 4]) {
    let zero = T::zero();
    let one = T::one();
    let two = lit::<T>(2.0);
    let half = lit::<T>(0.5);

    let (px1, py1, px2, py2) = (pred.x, pred.y, pred.right(), pred.bottom());
    let (gx1, gy1, gx2, gy2) = (gt.x, gt.y, gt.right(), gt.bottom());

    // IoU
    let ix_hi_pred = px2 < gx2;
    let ix_lo_pred = px1 > gx1;
    let iy_hi_pred = py2 < gy2;
    let iy_lo_pred = py1 > gy1;
    let iw_raw = px2.min(gx2) - px1.max(gx1);
    let ih_raw = py2.min(gy2) - py1.max(gy1);
    let iw = iw_raw.max(zero);
    let ih = ih_raw.max(zero);
    let inter = iw * ih;
    let union = pred.area() + gt.area() - inter;
    let iou = (inter / union).min(one);

    // centre offsets and enclosing box
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let dx = gcx - pcx;
    let dy = gcy - pcy;
    let ex_hi_pred = px2 >= gx2;
    let ex_lo_pred = px1 <= gx1;
    let ey_hi_pred = py2 >= gy2;
    let ey_lo_pred = py1 <= gy1;
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);

    // angle cost
    let sigma = (dx * dx + dy * dy).sqrt();
    let threshold = lit::<T>(std::f64::consts::FRAC_1_SQRT_2);
    let (angle, use_dy) = if sigma > zero {
        let sin_alpha = dy.abs() / sigma;
        let use_dy = sin_alpha <= threshold;
        let s = if use_dy { sin_alpha } else { dx.abs() / sigma };
        (two * s * (one - s * s).sqrt(), use_dy)
    } else {
        (zero, true)
    };

    // distance cost
    let gamma = two - angle;
    let rho_x = (dx / cw) * (dx / cw);
    let rho_y = (dy / ch) * (dy / ch);
    let ex = (-gamma * rho_x).exp();
    let ey = (-gamma * rho_y).exp();
    let distance = two - ex - ey;

    // shape cost
    let omega = |p: T, g: T| (p - g).abs() / p.max(g);
    let omega_w = omega(pred.w, gt.w);
    let omega_h = omega(pred.h, gt.h);
    let shape_term = |o: T| (one - (-o).exp()).powi(SIOU_THETA);
    let shape = shape_term(omega_w) + shape_term(omega_h);

    let loss = one - iou + half * (distance + shape);

    // reverse pass
    let (mut gx, mut gy, mut gw, mut gh) = (zero, zero, zero, zero);

    let d_iou = -one;
    let d_inter = d_iou * (one / union + inter / (union * union));
    let d_area = d_iou * (-inter / (union * union));
    gw += d_area * pred.h;
    gh += d_area * pred.w;
    if iw_raw > zero && ih_raw > zero {
        let d_iw = d_inter * ih;
        let d_ih = d_inter * iw;
        if ix_hi_pred {
            gx += d_iw;
            gw += d_iw;
        }
        if ix_lo_pred {
            gx -= d_iw;
        }
        if iy_hi_pred {
            gy += d_ih;
            gh += d_ih;
        }
        if iy_lo_pred {
            gy -= d_ih;
        }
    }

    let d_distance = half;
    let d_rho_x = d_distance * gamma * ex;
    let d_rho_y = d_distance * gamma * ey;
    let d_gamma = d_distance * (rho_x * ex + rho_y * ey);
    let d_angle = -d_gamma;

    let mut d_dx = d_rho_x * two * dx / (cw * cw);
    let mut d_dy = d_rho_y * two * dy / (ch * ch);
    let d_cw = d_rho_x * (-two * dx * dx / (cw * cw * cw));
    let d_ch = d_rho_y * (-two * dy * dy / (ch * ch * ch));

    if sigma > zero {
        let (own, other) = if use_dy { (dy, dx) } else { (dx, dy) };
        let s = own.abs() / sigma;
        let root = (one - s * s).sqrt();
        if root > zero {
            let d_s = d_angle * two * (one - two * s * s) / root;
            let s3 = sigma * sigma * sigma;
            let d_own = d_s * (own.signum() / sigma - own.abs() * own / s3);
            let d_other = d_s * (-own.abs() * other / s3);
            if use_dy {
                d_dy += d_own;
                d_dx += d_other;
            } else {
                d_dx += d_own;
                d_dy += d_other;
            }
        }
    }

    // dx = gcx - (x + w/2)
    gx -= d_dx;
    gw -= half * d_dx;
    gy -= d_dy;
    gh -= half * d_dy;

    if ex_hi_pred {
        gx += d_cw;
        gw += d_cw;
    }
    if ex_lo_pred {
        gx -= d_cw;
    }
    if ey_hi_pred {
        gy += d_ch;
        gh += d_ch;
    }
    if ey_lo_pred {
        gy -= d_ch;
    }

    let d_omega = |o: T| {
        let e = (-o).exp();
        half * lit::<T>(SIOU_THETA as f64) * (one - e).powi(SIOU_THETA - 1) * e
    };
    let omega_slope = |p: T, g: T| {
        if p > g {
            g / (p * p)
        } else if p < g {
            -one / g
        } else {
            zero
        }
    };
    gw += d_omega(omega_w) * omega_slope(pred.w, gt.w);
    gh += d_omega(omega_h) * omega_slope(pred.h, gt.h);

    (loss, [gx, gy, gw, gh])
}

/// Square crop of a frame, resampled to `out_size x out_size`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec<T> {
    pub center: (T, T),
    pub side: T,
    pub out_size: usize,
    /// `out_size / side`.
    pub scale: T,
}

impl<T: Scalar> CropSpec<T> {
    pub fn new(center: (T, T), side: T, out_size: usize) -> Result<Self> {
        if !(side > T::zero()) || !side.is_finite() || out_size == 0 {
            return Err(Error::InvalidBox(format!("crop side {side} / output {out_size} must be positive")));
        }
        Ok(Self { center, side, out_size, scale: T::from_usize_lossy(out_size) / side })
    }

    /// Frame coordinates of the crop's top-left corner.
    pub fn origin(&self) -> (T, T) {
        let half = lit::<T>(0.5) * self.side;
        (self.center.0 - half, self.center.1 - half)
    }

    pub fn point_to_crop(&self, p: (T, T)) -> (T, T) {
        let (ox, oy) = self.origin();
        ((p.0 - ox) * self.scale, (p.1 - oy) * self.scale)
    }

    pub fn point_to_frame(&self, p: (T, T)) -> (T, T) {
        let (ox, oy) = self.origin();
        (p.0 / self.scale + ox, p.1 / self.scale + oy)
    }
}

/// Crop centred on `bbox` with side `area_factor * sqrt(w * h)`.
///
/// The crop may extend past the frame; samplers fill those pixels with the
/// frame's mean intensity.
pub fn make_crop<T: Scalar>(
    frame_size: (usize, usize),
    bbox: &BBox<T>,
    area_factor: T,
    out_size: usize,
) -> Result<CropSpec<T>> {
    bbox.validate()?;
    if !(area_factor > T::zero()) {
        return Err(Error::Config(format!("area factor must be positive, got {area_factor}")));
    }
    if frame_size.0 == 0 || frame_size.1 == 0 {
        return Err(Error::InvalidBox("empty frame".into()));
    }
    let side = area_factor * bbox.area().sqrt();
    CropSpec::new(bbox.center(), side, out_size)
}

pub fn box_to_crop_coords<T: Scalar>(b: &BBox<T>, crop: &CropSpec<T>) -> BBox<T> {
    let (x, y) = crop.point_to_crop((b.x, b.y));
    BBox::new_unchecked(x, y, b.w * crop.scale, b.h * crop.scale)
}

pub fn crop_to_frame_coords<T: Scalar>(b: &BBox<T>, crop: &CropSpec<T>) -> BBox<T> {
    let (x, y) = crop.point_to_frame((b.x, b.y));
    BBox::new_unchecked(x, y, b.w / crop.scale, b.h / crop.scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox<f64> {
        BBox::new(x, y, w, h).unwrap()
    }

    /// Count unit cells covered by each integer box.
    fn pixel_iou(a: &BBox<f64>, c: &BBox<f64>) -> f64 {
        let cells = |bb: &BBox<f64>| {
            let mut v = Vec::new();
            for yy in bb.y as i64..(bb.y + bb.h) as i64 {
                for xx in bb.x as i64..(bb.x + bb.w) as i64 {
                    v.push((xx, yy));
                }
            }
            v
        };
        let ca = cells(a);
        let cc: std::collections::HashSet<_> = cells(c).into_iter().collect();
        let inter = ca.iter().filter(|p| cc.contains(p)).count();
        let union = ca.len() + cc.len() - inter;
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(0., 0., 10., 10.)).unwrap(), 1.0);
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(20., 20., 5., 5.)).unwrap(), 0.0);
        let v = iou(&b(0., 0., 10., 10.), &b(5., 5., 10., 10.)).unwrap();
        assert!((v - 25.0 / 175.0).abs() < 1e-12);
        assert!((v - pixel_iou(&b(0., 0., 10., 10.), &b(5., 5., 10., 10.))).abs() < 1e-12);
    }

    #[test]
    fn touching_edges_do_not_overlap() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(10., 0., 10., 10.)).unwrap(), 0.0);
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        let bad = BBox::new_unchecked(0.0, 0.0, -1.0, 1.0);
        assert!(matches!(iou(&bad, &b(0., 0., 1., 1.)), Err(Error::InvalidBox(_))));
        assert!(matches!(siou_loss(&b(0., 0., 1., 1.), &bad), Err(Error::InvalidBox(_))));
        assert!(make_crop((10, 10), &bad, 2.0, 8).is_err());
    }

    #[test]
    fn siou_examples() {
        let g = b(3., 4., 10., 12.);
        assert_eq!(siou_loss(&g, &g).unwrap(), 0.0);
        assert!(siou_loss(&b(0., 0., 5., 5.), &b(50., 60., 5., 5.)).unwrap() >= 1.0);
        assert!(siou_loss(&b(0., 0., 10., 10.), &b(5., 5., 10., 10.)).unwrap() > 0.0);
    }

    #[test]
    fn crop_examples() {
        let c = make_crop((512, 512), &b(100., 100., 50., 50.), 2.0, 128).unwrap();
        assert_eq!(c.side, 100.0);
        assert_eq!(c.center, (125.0, 125.0));
        assert!((c.scale - 1.28).abs() < 1e-12);
        let c = make_crop((512, 512), &b(0., 0., 64., 64.), 4.0, 256).unwrap();
        assert_eq!((c.side, c.scale), (256.0, 1.0));
    }

    #[test]
    fn identity_and_scaling_crops() {
        let id = CropSpec::new((64.0, 64.0), 128.0, 128).unwrap();
        let bx = b(10., 20., 30., 40.);
        assert_eq!(box_to_crop_coords(&bx, &id), bx);
        let twice = CropSpec::new((64.0, 64.0), 64.0, 128).unwrap();
        let m = box_to_crop_coords(&bx, &twice);
        assert_eq!((m.w, m.h), (60.0, 80.0));
    }

    #[test]
    fn edge_crop_round_trips_gt_corners() {
        let frame = (100usize, 80usize);
        let gt = b(0.5, 70.0, 12.0, 9.0);
        let c = make_crop(frame, &gt, 4.0, 64).unwrap();
        let (ox, oy) = c.origin();
        assert!(ox < 0.0 && oy + c.side > 80.0);
        let back = crop_to_frame_coords(&box_to_crop_coords(&gt, &c), &c);
        for (p, q) in [(back.x, gt.x), (back.y, gt.y), (back.w, gt.w), (back.h, gt.h)] {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn clamp_keeps_box_inside() {
        let c = b(-20., 70., 30., 40.).clamp_to_frame(100., 80., 2.);
        assert_eq!((c.x, c.y, c.w, c.h), (0., 70., 10., 10.));
        let tiny = b(99.5, 10., 0.1, 0.1).clamp_to_frame(100., 80., 2.);
        assert_eq!((tiny.x, tiny.w), (98., 2.));
    }

    #[test]
    fn line_format() {
        let v: BBox<f64> = BBox::parse_line("10,20,30,40").unwrap();
        assert_eq!(v, b(10., 20., 30., 40.));
        assert!(BBox::<f64>::parse_line("10,20,0,40").is_err());
        assert!(BBox::<f64>::parse_line("10,20,NaN,40").is_err());
        assert!(BBox::<f64>::parse_line("10,20,30").is_err());
        assert_eq!(b(1.0, 2.5, 3.333, 4.0).to_line(), "1.00,2.50,3.33,4.00");
    }

    fn int_box() -> impl Strategy<Value = BBox<f64>> {
        (0i32..40, 0i32..40, 1i32..25, 1i32..25).prop_map(|(x, y, w, h)| b(x as f64, y as f64, w as f64, h as f64))
    }

    fn real_box() -> impl Strategy<Value = BBox<f64>> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64).prop_map(|(x, y, w, h)| b(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded_and_matches_pixels(a in int_box(), c in int_box()) {
            let v = iou(&a, &c).unwrap();
            prop_assert_eq!(v, iou(&c, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - pixel_iou(&a, &c)).abs() <= 1e-9);
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn siou_nonnegative_and_finite(p in real_box(), g in real_box()) {
            let v = siou_loss(&p, &g).unwrap();
            prop_assert!(v.is_finite() && v >= 0.0);
            prop_assert!(siou_loss(&g, &g).unwrap().abs() <= 1e-12);
        }

        #[test]
        fn crop_round_trip(bx in real_box(), cx in 0.0..200.0f64, cy in 0.0..200.0f64,
                           side in 5.0..300.0f64, out in 8usize..300) {
            let c = CropSpec::new((cx, cy), side, out).unwrap();
            let back = crop_to_frame_coords(&box_to_crop_coords(&bx, &c), &c);
            prop_assert!((back.x - bx.x).abs() < 1e-6);
            prop_assert!((back.y - bx.y).abs() < 1e-6);
            prop_assert!((back.w - bx.w).abs() < 1e-6);
            prop_assert!((back.h - bx.h).abs() < 1e-6);
        }
    }
}
