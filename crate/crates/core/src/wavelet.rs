//! One-level separable Haar analysis and synthesis.
//!
//! Both 1D filters carry a factor of 1/2: `a = (p + q) / 2`, `d = (p - q) / 2`,
//! so synthesis is `p = a + d`, `q = a - d` and `|x|^2 = 4 * sum of band energies`.
//! The width pass runs first, then the height pass:
//!
//! * `A` lowpass along width and height
//! * `H` lowpass along width, highpass along height (horizontal edges)
//! * `V` highpass along width, lowpass along height (vertical edges)
//! * `D` highpass along both

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletQuad {
    pub a: Tensor,
    pub h: Tensor,
    pub v: Tensor,
    pub d: Tensor,
}

impl WaveletQuad {
    pub fn bands(&self) -> [&Tensor; 4] {
        [&self.a, &self.h, &self.v, &self.d]
    }

    /// Sum of squared coefficients over all four bands.
    pub fn energy(&self) -> f64 {
        self.bands().iter().map(|b| b.sum_sq()).sum()
    }

    /// Energy of the three detail bands `(H, V, D)`.
    pub fn detail_energy(&self) -> [f64; 3] {
        [self.h.sum_sq(), self.v.sum_sq(), self.d.sum_sq()]
    }

    /// Per-sample channel stacking `[A | H | V | D]`: dims `(N, 4C, H/2, W/2)`.
    pub fn stacked(&self) -> Tensor {
        let [n, c, h, w] = self.a.dims();
        let band = c * h * w;
        let mut data = Vec::with_capacity(4 * n * band);
        for b in 0..n {
            for t in self.bands() {
                data.extend_from_slice(&t.data()[b * band..(b + 1) * band]);
            }
        }
        Tensor::from_parts([n, 4 * c, h, w], data)
    }

    pub fn from_stacked(t: &Tensor) -> Result<Self> {
        let [_, c4, _, _] = t.dims();
        if c4 % 4 != 0 {
            return Err(Error::shape("wavelet quad", format!("{c4} channels not divisible by 4")));
        }
        let c = c4 / 4;
        Ok(Self {
            a: t.channels(0, c)?,
            h: t.channels(c, 2 * c)?,
            v: t.channels(2 * c, 3 * c)?,
            d: t.channels(3 * c, 4 * c)?,
        })
    }
}

pub fn haar_dwt2(x: &Tensor) -> Result<WaveletQuad> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "haar_dwt2",
            format!("spatial extent {h}x{w} must be even (reflect-pad first)"),
        ));
    }
    let (h2, w2) = (h / 2, w / 2);
    let len = n * c * h2 * w2;
    let (mut a, mut hh, mut v, mut d) = (
        Vec::with_capacity(len),
        Vec::with_capacity(len),
        Vec::with_capacity(len),
        Vec::with_capacity(len),
    );
    let xd = x.data();
    for plane in 0..n * c {
        let p = &xd[plane * h * w..(plane + 1) * h * w];
        for i in 0..h2 {
            let r0 = &p[2 * i * w..(2 * i + 1) * w];
            let r1 = &p[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..w2 {
                // width pass
                let a0 = (r0[2 * j] + r0[2 * j + 1]) / 2.0;
                let d0 = (r0[2 * j] - r0[2 * j + 1]) / 2.0;
                let a1 = (r1[2 * j] + r1[2 * j + 1]) / 2.0;
                let d1 = (r1[2 * j] - r1[2 * j + 1]) / 2.0;
                // height pass
                a.push((a0 + a1) / 2.0);
                hh.push((a0 - a1) / 2.0);
                v.push((d0 + d1) / 2.0);
                d.push((d0 - d1) / 2.0);
            }
        }
    }
    let dims = [n, c, h2, w2];
    Ok(WaveletQuad {
        a: Tensor::from_parts(dims, a),
        h: Tensor::from_parts(dims, hh),
        v: Tensor::from_parts(dims, v),
        d: Tensor::from_parts(dims, d),
    })
}

pub fn haar_idwt2(q: &WaveletQuad) -> Result<Tensor> {
    let dims = q.a.dims();
    for b in [&q.h, &q.v, &q.d] {
        if b.dims() != dims {
            return Err(Error::shape(
                "haar_idwt2",
                format!("band dims {:?} differ from approximation {:?}", b.dims(), dims),
            ));
        }
    }
    let [n, c, h2, w2] = dims;
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let off = plane * h2 * w2;
        let o = &mut out[plane * h * w..(plane + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let k = off + i * w2 + j;
                let (av, hv, vv, dv) = (q.a.data()[k], q.h.data()[k], q.v.data()[k], q.d.data()[k]);
                // height synthesis
                let (a0, a1) = (av + hv, av - hv);
                let (d0, d1) = (vv + dv, vv - dv);
                // width synthesis
                o[2 * i * w + 2 * j] = a0 + d0;
                o[2 * i * w + 2 * j + 1] = a0 - d0;
                o[(2 * i + 1) * w + 2 * j] = a1 + d1;
                o[(2 * i + 1) * w + 2 * j + 1] = a1 - d1;
            }
        }
    }
    Ok(Tensor::from_parts([n, c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn band_value(t: &Tensor) -> f64 {
        t.data()[0]
    }

    #[test]
    fn hand_two_by_two() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let q = haar_dwt2(&x).unwrap();
        assert_eq!(
            [band_value(&q.a), band_value(&q.v), band_value(&q.h), band_value(&q.d)],
            [4.0, -1.0, -2.0, 0.0]
        );
        assert_eq!(haar_idwt2(&q).unwrap(), x);
    }

    #[test]
    fn constant_has_no_detail() {
        let x = Tensor::full([1, 2, 6, 4], 3.25);
        let q = haar_dwt2(&x).unwrap();
        assert!(q.a.data().iter().all(|&v| v == 3.25));
        assert_eq!(q.detail_energy(), [0.0; 3]);
        let back = haar_idwt2(&q).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn vertical_step_lights_v_at_step_only() {
        // step between columns 2 and 3 (inside pair 1), brute-force filter evaluation
        let x = Tensor::from_fn([1, 1, 4, 8], |_, _, _, w| if w >= 3 { 1.0 } else { 0.0 });
        let q = haar_dwt2(&x).unwrap();
        assert_eq!(q.h.sum_sq(), 0.0);
        assert_eq!(q.d.sum_sq(), 0.0);
        for i in 0..2 {
            for j in 0..4 {
                let expect = if j == 1 { -0.5 } else { 0.0 };
                assert_eq!(q.v.at(0, 0, i, j), expect);
            }
        }
    }

    #[test]
    fn odd_extent_rejected() {
        assert!(haar_dwt2(&Tensor::zeros([1, 1, 3, 4])).is_err());
    }

    #[test]
    fn band_mismatch_rejected() {
        let q = WaveletQuad {
            a: Tensor::zeros([1, 1, 2, 2]),
            h: Tensor::zeros([1, 1, 2, 2]),
            v: Tensor::zeros([1, 1, 2, 3]),
            d: Tensor::zeros([1, 1, 2, 2]),
        };
        assert!(haar_idwt2(&q).is_err());
    }

    #[test]
    fn stacked_round_trip() {
        let x = Tensor::from_fn([2, 3, 4, 6], |n, c, h, w| (n * 7 + c * 5 + h * 3 + w) as f64 * 0.1);
        let q = haar_dwt2(&x).unwrap();
        assert_eq!(WaveletQuad::from_stacked(&q.stacked()).unwrap(), q);
    }

    proptest! {
        #[test]
        fn reconstruction_energy_and_linearity(
            vals in proptest::collection::vec(-10.0f64..10.0, 2 * 3 * 8 * 6),
            other in proptest::collection::vec(-10.0f64..10.0, 2 * 3 * 8 * 6),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let dims = [2, 3, 8, 6];
            let x = Tensor::new(dims, vals).unwrap();
            let y = Tensor::new(dims, other).unwrap();
            let q = haar_dwt2(&x).unwrap();
            prop_assert!(haar_idwt2(&q).unwrap().max_abs_diff(&x) <= 1e-12);
            let e = x.sum_sq();
            prop_assert!((e - 4.0 * q.energy()).abs() <= 1e-9 * e.max(1.0));

            let mix = Tensor::new(dims, x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
            let qm = haar_dwt2(&mix).unwrap();
            let qy = haar_dwt2(&y).unwrap();
            for (bm, (bx, by)) in qm.bands().iter().zip(q.bands().iter().zip(qy.bands())) {
                for ((m, a), b) in bm.data().iter().zip(bx.data()).zip(by.data()) {
                    let expect = alpha * a + beta * b;
                    prop_assert!((m - expect).abs() <= 1e-10 * expect.abs().max(1.0));
                }
            }
        }
    }
}
