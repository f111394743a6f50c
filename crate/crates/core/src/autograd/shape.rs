//! Layout operations: concatenation, reshape, and index-map gathers
//! (window tiling, token layout, reflect padding, cropping, channel slices).

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Dims, Tensor};

/// Mirror-reflect an index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n-2`), repeating as often as needed for large pads.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// A pure re-indexing `out[i] = in[index[i]]`; backward scatters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gather {
    pub in_dims: Dims,
    pub out_dims: Dims,
    pub index: Vec<usize>,
}

impl Gather {
    fn build(in_dims: Dims, out_dims: Dims, mut src: impl FnMut(usize, usize, usize, usize) -> usize) -> Self {
        let mut index = Vec::with_capacity(numel(out_dims));
        for n in 0..out_dims[0] {
            for c in 0..out_dims[1] {
                for h in 0..out_dims[2] {
                    for w in 0..out_dims[3] {
                        index.push(src(n, c, h, w));
                    }
                }
            }
        }
        Self {
            in_dims,
            out_dims,
            index,
        }
    }

    fn flat(d: Dims, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * d[1] + c) * d[2] + h) * d[3] + w
    }

    /// `(N,C,H,W) -> (N * windows, 1, ws*ws, C)`; windows ordered row-major per image.
    pub fn window_partition(d: Dims, ws: usize) -> Result<Self> {
        let [n, c, h, w] = d;
        if ws == 0 || h % ws != 0 || w % ws != 0 {
            return Err(Error::shape(
                "window_partition",
                format!("extent {h}x{w} not divisible by window {ws}"),
            ));
        }
        let (nh, nw) = (h / ws, w / ws);
        Ok(Self::build(d, [n * nh * nw, 1, ws * ws, c], |win, _, t, ch| {
            let b = win / (nh * nw);
            let (wy, wx) = ((win % (nh * nw)) / nw, win % nw);
            Self::flat(d, b, ch, wy * ws + t / ws, wx * ws + t % ws)
        }))
    }

    /// Inverse of [`Gather::window_partition`] for an original map of dims `d`.
    pub fn window_unpartition(d: Dims, ws: usize) -> Result<Self> {
        let fwd = Self::window_partition(d, ws)?;
        Ok(fwd.inverse())
    }

    /// `(N,C,H,W) -> (N,1,H*W,C)`.
    pub fn to_tokens(d: Dims) -> Self {
        let [n, c, h, w] = d;
        Self::build(d, [n, 1, h * w, c], |b, _, t, ch| Self::flat(d, b, ch, t / w, t % w))
    }

    /// `(N,1,H*W,C) -> (N,C,H,W)` for a map of dims `d`.
    pub fn from_tokens(d: Dims) -> Self {
        Self::to_tokens(d).inverse()
    }

    /// `(B,1,T,C) -> (B,heads,T,C/heads)`; head `i` takes embedding columns `[i*C/heads, (i+1)*C/heads)`.
    pub fn split_heads(d: Dims, heads: usize) -> Result<Self> {
        let [b, one, t, c] = d;
        if one != 1 || heads == 0 || c % heads != 0 {
            return Err(Error::shape("split_heads", format!("{heads} heads over token dims {d:?}")));
        }
        let dh = c / heads;
        Ok(Self::build(d, [b, heads, t, dh], |n, hd, tok, j| Self::flat(d, n, 0, tok, hd * dh + j)))
    }

    pub fn reflect_pad(d: Dims, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        let [n, c, h, w] = d;
        Self::build(d, [n, c, h + top + bottom, w + left + right], |b, ch, y, x| {
            let sy = reflect_index(y as isize - top as isize, h);
            let sx = reflect_index(x as isize - left as isize, w);
            Self::flat(d, b, ch, sy, sx)
        })
    }

    pub fn crop(d: Dims, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > d[2] || left + w > d[3] || h == 0 || w == 0 {
            return Err(Error::shape("crop", format!("{h}x{w}+{top}+{left} from {d:?}")));
        }
        Ok(Self::build(d, [d[0], d[1], h, w], |b, ch, y, x| Self::flat(d, b, ch, y + top, x + left)))
    }

    pub fn slice_channels(d: Dims, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > d[1] {
            return Err(Error::shape("slice_channels", format!("{start}..{end} of {:?}", d)));
        }
        Ok(Self::build(d, [d[0], end - start, d[2], d[3]], |b, ch, y, x| Self::flat(d, b, ch + start, y, x)))
    }

    /// Inverse of a bijective gather.
    pub fn inverse(&self) -> Self {
        debug_assert_eq!(numel(self.in_dims), self.index.len());
        let mut index = vec![0; self.index.len()];
        for (o, &i) in self.index.iter().enumerate() {
            index[i] = o;
        }
        Self {
            in_dims: self.out_dims,
            out_dims: self.in_dims,
            index,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.dims() != self.in_dims {
            return Err(Error::shape(
                "gather",
                format!("expected {:?}, got {:?}", self.in_dims, x.dims()),
            ));
        }
        let d = x.data();
        Ok(Tensor::from_parts(self.out_dims, self.index.iter().map(|&i| d[i]).collect()))
    }
}

pub(super) fn gather_backward(input_len: usize, index: &[usize], g: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&i, gv) in index.iter().zip(g) {
        dx[i] += gv;
    }
    dx
}

pub(super) fn concat_backward(inputs: &[Var], dims: impl Fn(Var) -> Dims, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let [n, _, h, w] = dims(inputs[0]);
    let plane = h * w;
    let total: usize = inputs.iter().map(|&v| dims(v)[1]).sum();
    let mut offset = 0;
    inputs
        .iter()
        .map(|&v| {
            let c = dims(v)[1];
            let mut d = Vec::with_capacity(n * c * plane);
            for b in 0..n {
                let base = (b * total + offset) * plane;
                d.extend_from_slice(&g[base..base + c * plane]);
            }
            offset += c;
            (v, d)
        })
        .collect()
}

impl Tape {
    pub fn gather(&mut self, input: Var, gather: &Gather) -> Result<Var> {
        let value = gather.apply(self.value(input))?;
        self.push(
            value,
            Op::Gather {
                input,
                index: gather.index.clone(),
            },
        )
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero operands".into()))?;
        let [n, _, h, w] = self.dims(first);
        for &v in inputs {
            let [vn, _, vh, vw] = self.dims(v);
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", self.dims(first), self.dims(v)),
                ));
            }
        }
        let total: usize = inputs.iter().map(|&v| self.dims(v)[1]).sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &v in inputs {
                let c = self.dims(v)[1];
                data.extend_from_slice(&self.value(v).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::from_parts([n, total, h, w], data);
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let g = Gather::slice_channels(self.dims(input), start, end)?;
        self.gather(input, &g)
    }

    pub fn reshape(&mut self, input: Var, dims: Dims) -> Result<Var> {
        let value = self.value(input).clone().with_requires_grad(false).reshape(dims)?;
        self.push(value, Op::Reshape { input })
    }

    /// Reflect-pads so both spatial extents become multiples of `multiple`.
    /// Returns the padded value and the original `(h, w)` for a later crop.
    pub fn pad_to_multiple(&mut self, input: Var, multiple: usize) -> Result<(Var, (usize, usize))> {
        let d = self.dims(input);
        let (h, w) = (d[2], d[3]);
        let ph = (multiple - h % multiple) % multiple;
        let pw = (multiple - w % multiple) % multiple;
        if ph == 0 && pw == 0 {
            return Ok((input, (h, w)));
        }
        let g = Gather::reflect_pad(d, 0, ph, 0, pw);
        Ok((self.gather(input, &g)?, (h, w)))
    }

    pub fn crop(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let d = self.dims(input);
        if (d[2], d[3]) == (h, w) {
            return Ok(input);
        }
        let g = Gather::crop(d, 0, 0, h, w)?;
        self.gather(input, &g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn partition_round_trip_and_tiling() {
        let d = [1, 4, 8, 8];
        let x = Tensor::from_fn(d, |_, c, h, w| (c * 100 + h * 10 + w) as f64);
        let p = Gather::window_partition(d, 4).unwrap();
        let tiles = p.apply(&x).unwrap();
        assert_eq!(tiles.dims(), [4, 1, 16, 4]);
        // window 1, token 0 is position (0, 4)
        assert_eq!(tiles.at(1, 0, 0, 0), x.at(0, 0, 0, 4));
        assert_eq!(tiles.at(1, 0, 0, 3), x.at(0, 3, 0, 4));
        let back = Gather::window_unpartition(d, 4).unwrap().apply(&tiles).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn full_extent_window_is_single() {
        let d = [2, 3, 5, 5];
        let p = Gather::window_partition(d, 5).unwrap();
        assert_eq!(p.out_dims, [2, 1, 25, 3]);
    }

    #[test]
    fn tokens_round_trip() {
        let d = [2, 3, 2, 5];
        let x = Tensor::from_fn(d, |n, c, h, w| (n * 1000 + c * 100 + h * 10 + w) as f64);
        let t = Gather::to_tokens(d).apply(&x).unwrap();
        assert_eq!(t.at(1, 0, 7, 2), x.at(1, 2, 1, 2));
        assert_eq!(Gather::from_tokens(d).apply(&t).unwrap(), x);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([2, 2, 2, 2], |n, c, h, w| (n + c + h + w) as f64));
        let b = tape.constant(Tensor::from_fn([2, 3, 2, 2], |n, c, h, w| -((n * c + h * w) as f64)));
        let cat = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.dims(cat), [2, 5, 2, 2]);
        let sa = tape.slice_channels(cat, 0, 2).unwrap();
        let sb = tape.slice_channels(cat, 2, 5).unwrap();
        assert_eq!(tape.value(sa), tape.value(a));
        assert_eq!(tape.value(sb), tape.value(b));
    }
}
