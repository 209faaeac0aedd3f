use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, ParamStore};
use crate::tensor::Real;

/// Feature pyramid over the stride-8/16/32 backbone grids, plus a stride-64
/// level subsampled from the stride-32 output.
///
/// With `repeats == 1` this is the usual FPN: 1x1 laterals, nearest-neighbour
/// top-down additions and one 3x3 output convolution per level. Each further
/// repeat feeds the previous top-down maps through `relu(bn(conv1x1))`
/// laterals, runs another top-down pass and adds a skip from the backbone
/// projections. The output convolutions run once, after the last repeat.
/// Convolutions followed by BatchNorm carry no bias.
#[derive(Clone, Debug)]
pub struct Fpn {
    pub channels: usize,
    lateral: [Conv2d; 3],
    repeats: Vec<[(Conv2d, BatchNorm); 3]>,
    output: [(Conv2d, BatchNorm); 3],
}

fn top_down<'a, R: Real>(lat: [Var<'a, R>; 3]) -> [Var<'a, R>; 3] {
    let [l3, l4, l5] = lat;
    let t4 = l4.add(&l5.upsample2x());
    let t3 = l3.add(&t4.upsample2x());
    [t3, t4, l5]
}

impl Fpn {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        in_channels: [usize; 3],
        channels: usize,
        repeats: usize,
    ) -> Result<Self> {
        if repeats < 1 {
            return Err(Error::Config(format!("detector.fpn_repeats must be at least 1, got {repeats}")));
        }
        let lateral = [0, 1, 2].map(|l| {
            Conv2d::new(store, rng, &format!("fpn.lateral{}", l + 3), in_channels[l], channels, 1, 1, 0, true)
        });
        let repeats = (1..repeats)
            .map(|r| {
                [0, 1, 2].map(|l| {
                    let name = format!("fpn.repeat{r}.lateral{}", l + 3);
                    (
                        Conv2d::new(store, rng, &name, channels, channels, 1, 1, 0, false),
                        BatchNorm::new(store, &format!("{name}.bn"), channels),
                    )
                })
            })
            .collect();
        let output = [0, 1, 2].map(|l| {
            let name = format!("fpn.output{}", l + 3);
            (
                Conv2d::new(store, rng, &name, channels, channels, 3, 1, 1, false),
                BatchNorm::new(store, &format!("{name}.bn"), channels),
            )
        });
        Ok(Self {
            channels,
            lateral,
            repeats,
            output,
        })
    }

    pub fn repeats(&self) -> usize {
        self.repeats.len() + 1
    }

    /// `[P3, P4, P5, P6]` from the stride-8/16/32 grids.
    pub fn forward<'a, R: Real>(&self, ctx: &Ctx<'a, R>, c: &[Var<'a, R>]) -> [Var<'a, R>; 4] {
        assert_eq!(c.len(), 3, "three backbone levels");
        let skip = [0, 1, 2].map(|l| self.lateral[l].forward(ctx, &c[l]));
        let mut t = top_down(skip.clone());
        for rep in &self.repeats {
            let lat = [0, 1, 2].map(|l| {
                let (conv, bn) = &rep[l];
                bn.forward(ctx, &conv.forward(ctx, &t[l])).relu()
            });
            let next = top_down(lat);
            t = [0, 1, 2].map(|l| next[l].add(&skip[l]));
        }
        let [p3, p4, p5] = [0, 1, 2].map(|l| {
            let (conv, bn) = &self.output[l];
            bn.forward(ctx, &conv.forward(ctx, &t[l]))
        });
        let p6 = p5.subsample2x();
        [p3, p4, p5, p6]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::normal_tensor;
    use crate::seed::rng;
    use crate::tensor::Tensor;

    fn inputs(b: usize, side: usize, ch: [usize; 3], seed: u64) -> Vec<Tensor<f64>> {
        let mut r = rng(seed);
        (0..3)
            .map(|l| normal_tensor(&mut r, &[b, side >> l, side >> l, ch[l]], 1.0))
            .collect()
    }

    fn run(fpn: &Fpn, store: &ParamStore<f64>, x: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, store);
        let c: Vec<_> = x.iter().map(|t| tape.constant(t.clone())).collect();
        fpn.forward(&ctx, &c).iter().map(|v| (*v.value()).clone()).collect()
    }

    /// Direct loops over NHWC arrays: convolution with zero padding, nearest
    /// upsampling and eval-mode BatchNorm.
    fn conv_ref(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, pad: usize) -> Tensor<f64> {
        let (b, h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (k, co) = (w.shape()[0], w.shape()[3]);
        let mut out = Tensor::zeros(&[b, h, wd, co]);
        for n in 0..b {
            for y in 0..h {
                for xx in 0..wd {
                    for o in 0..co {
                        let mut s = bias.map_or(0.0, |b| b.data()[o]);
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky, xx + kx);
                                if sy < pad || sx < pad || sy - pad >= h || sx - pad >= wd {
                                    continue;
                                }
                                for c in 0..ci {
                                    let xv = x.data()[((n * h + sy - pad) * wd + sx - pad) * ci + c];
                                    s += xv * w.data()[((ky * k + kx) * ci + c) * co + o];
                                }
                            }
                        }
                        out.data_mut()[((n * h + y) * wd + xx) * co + o] = s;
                    }
                }
            }
        }
        out
    }

    fn up_ref(x: &Tensor<f64>) -> Tensor<f64> {
        let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut out = Tensor::zeros(&[b, 2 * h, 2 * w, c]);
        for n in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    for ch in 0..c {
                        out.data_mut()[((n * 2 * h + y) * 2 * w + xx) * c + ch] =
                            x.data()[((n * h + y / 2) * w + xx / 2) * c + ch];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_repeat_matches_reference_fpn() {
        let ch = [3, 5, 6];
        let mut store = ParamStore::<f64>::new();
        let fpn = Fpn::new(&mut store, &mut rng(3), ch, 4, 1).unwrap();
        // Non-trivial BatchNorm statistics.
        for i in 0..store.len() {
            if store.name(i).contains("running") || store.name(i).contains(".bn.") || store.name(i).ends_with("bias") {
                let v = store.value(i).map(|_| 0.0);
                let n = v.len();
                let data = (0..n).map(|j| 0.3 + 0.1 * j as f64).collect();
                store.set(i, Tensor::new(v.shape(), data));
            }
        }
        let x = inputs(2, 8, ch, 4);
        let got = run(&fpn, &store, &x);

        let p = |name: &str| store.value(store.find(name).unwrap()).clone();
        let lat: Vec<_> = (0..3)
            .map(|l| conv_ref(&x[l], &p(&format!("fpn.lateral{}.weight", l + 3)), Some(&p(&format!("fpn.lateral{}.bias", l + 3))), 0))
            .collect();
        let t5 = lat[2].clone();
        let t4 = lat[1].zip_map(&up_ref(&t5), |a, b| a + b);
        let t3 = lat[0].zip_map(&up_ref(&t4), |a, b| a + b);
        for (l, t) in [t3, t4, t5].iter().enumerate() {
            let n = format!("fpn.output{}", l + 3);
            let y = conv_ref(t, &p(&format!("{n}.weight")), None, 1);
            let (g, be, m, v) = (
                p(&format!("{n}.bn.gamma")),
                p(&format!("{n}.bn.beta")),
                p(&format!("{n}.bn.running_mean")),
                p(&format!("{n}.bn.running_var")),
            );
            let c = y.last_dim();
            let want: Vec<f64> = y
                .data()
                .iter()
                .enumerate()
                .map(|(i, &val)| {
                    let k = i % c;
                    (val - m.data()[k]) / (v.data()[k] + 1e-5).sqrt() * g.data()[k] + be.data()[k]
                })
                .collect();
            let diff = got[l].data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "level {} diff {diff}", l + 3);
        }
        assert_eq!(got[3].shape(), &[2, 1, 1, 4]);
    }

    #[test]
    fn level_sizes_and_capacity() {
        let ch = [64, 128, 128];
        let mut s1 = ParamStore::<f32>::new();
        let f1 = Fpn::new(&mut s1, &mut rng(1), ch, 64, 1).unwrap();
        let mut s12 = ParamStore::<f32>::new();
        Fpn::new(&mut s12, &mut rng(1), ch, 64, 12).unwrap();
        assert!(s12.num_trainable() > s1.num_trainable());
        assert!(Fpn::new(&mut ParamStore::<f32>::new(), &mut rng(1), ch, 64, 0).is_err());

        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &s1);
        let c: Vec<_> = (0..3).map(|l| tape.constant(Tensor::<f32>::zeros(&[1, 16 >> l, 16 >> l, ch[l]]))).collect();
        let out = f1.forward(&ctx, &c);
        let sides: Vec<usize> = out.iter().map(|v| v.shape()[1]).collect();
        assert_eq!(sides, vec![16, 8, 4, 2]);
        // Zero inputs and zero biases stay zero through eval-mode BatchNorm.
        assert!(out.iter().all(|v| v.value().data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn repeated_pyramid_is_finite_and_zero_preserving() {
        let ch = [3, 5, 6];
        let mut store = ParamStore::<f64>::new();
        let fpn = Fpn::new(&mut store, &mut rng(2), ch, 4, 4).unwrap();
        assert_eq!(fpn.repeats(), 4);
        let out = run(&fpn, &store, &inputs(1, 8, ch, 9));
        assert!(out.iter().all(|t| t.all_finite()));
        let zeros: Vec<_> = (0..3).map(|l| Tensor::zeros(&[1, 8 >> l, 8 >> l, ch[l]])).collect();
        assert!(run(&fpn, &store, &zeros).iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }
}
