use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|a - n| / max(1e-8, |a| + |n|)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_coord: usize,
    pub checked: usize,
    /// Coordinates left out because the step straddles a kink (ReLU, `|x|`),
    /// where no difference quotient estimates the derivative.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst_coord = other.worst_coord;
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }

    /// Fraction of attempted coordinates that were skipped as kinks.
    pub fn skipped_fraction(&self) -> f64 {
        match self.checked + self.skipped {
            0 => 0.0,
            n => self.skipped as f64 / n as f64,
        }
    }
}

/// Checks the tape gradient of a scalar function `f` at `x` over every coordinate.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
    let coords: Vec<usize> = (0..x.len()).collect();
    gradient_check_with(&analytic, &coords, epsilon, |coord, delta| {
        let mut moved = x.clone();
        moved.data_mut()[coord] += delta;
        let mut tape = Tape::new();
        let xv = tape.constant(moved);
        let out = f(&mut tape, xv)?;
        Ok(tape.item(out))
    })
}

/// Generic form: `eval(coord, delta)` must return the function value with
/// coordinate `coord` shifted by `delta`. `analytic` is indexed by coordinate.
pub fn gradient_check_with(
    analytic: &[f64],
    coords: &[usize],
    epsilon: f64,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let Some(&first) = coords.first() else {
        return Ok(report);
    };
    let center = eval(first, 0.0)?;
    for &coord in coords {
        let plus = eval(coord, epsilon)?;
        let minus = eval(coord, -epsilon)?;
        let a = analytic[coord];
        if !plus.is_finite() || !minus.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite { coord });
        }
        let forward = (plus - center) / epsilon;
        let backward = (center - minus) / epsilon;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let abs = (a - numeric).abs();
        let rel = abs / (a.abs() + numeric.abs()).max(1e-8);
        // Kink signature: one one-sided slope agrees with the analytic value and
        // the other jumps. Smooth curvature moves both symmetrically, and a
        // wrong gradient offsets both the same way.
        let rounding = 64.0 * f64::EPSILON * center.abs().max(plus.abs()).max(minus.abs()) / epsilon;
        let jump = (forward - backward).abs();
        let nearer = (forward - a).abs().min((backward - a).abs());
        if jump > 2.0 * rounding + 1e-5 * (forward.abs() + backward.abs()) && nearer < 0.1 * jump {
            report.skipped += 1;
            continue;
        }
        if rel > report.max_rel_err || report.checked == 0 {
            report.max_rel_err = rel;
            report.worst_coord = coord;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Real;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[5], &mut rng);
        let r = gradient_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::new([2], vec![0.0f64, 1.0]).unwrap();
        let err = gradient_check(
            |t, x| {
                let one = t.constant(Tensor::full([2], 1.0));
                let q = t.div(one, x)?;
                Ok(t.sum(q))
            },
            &x,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { coord: 0 }));
    }

    // Every primitive against central differences, 10 random trials each.
    #[test]
    fn primitives_match_finite_differences() {
        type Build = fn(&mut Tape<f64>, Var, &mut ChaCha8Rng) -> Result<Var>;
        let cases: Vec<(&str, Vec<usize>, Build)> = vec![
            ("matmul_left", vec![3, 4], |t, x, rng| {
                let w = t.constant(random(&[4, 2], rng));
                t.matmul(x, w)
            }),
            ("matmul_right", vec![4, 2], |t, x, rng| {
                let a = t.constant(random(&[3, 4], rng));
                t.matmul(a, x)
            }),
            ("add", vec![6], |t, x, rng| {
                let c = t.constant(random(&[6], rng));
                t.add(x, c)
            }),
            ("sub", vec![6], |t, x, rng| {
                let c = t.constant(random(&[6], rng));
                t.sub(c, x)
            }),
            ("mul", vec![6], |t, x, rng| {
                let c = t.constant(random(&[6], rng));
                t.mul(x, c)
            }),
            ("div", vec![6], |t, x, _| {
                let two = t.constant(Tensor::full([6], 2.0));
                let d = t.add(x, two)?;
                t.div(x, d)
            }),
            ("scale", vec![6], |t, x, _| Ok(t.scale(x, -1.7))),
            ("transpose", vec![2, 3], |t, x, rng| {
                let xt = t.transpose(x)?;
                let w = t.constant(random(&[2, 3], rng));
                t.matmul(xt, w)
            }),
            ("reshape", vec![6], |t, x, rng| {
                let r = t.reshape(x, [2, 3])?;
                let w = t.constant(random(&[3, 2], rng));
                t.matmul(r, w)
            }),
            ("concat", vec![2, 2], |t, x, rng| {
                let c = t.constant(random(&[2, 3], rng));
                let cat = t.concat(&[c, x, x], 1)?;
                let w = t.constant(random(&[7, 1], rng));
                t.matmul(cat, w)
            }),
            ("mean", vec![6], |t, x, _| Ok(t.mean(x))),
            ("sum_last", vec![2, 3], |t, x, rng| {
                let s = t.sum_last(x)?;
                let w = t.constant(random(&[2], rng));
                t.mul(s, w)
            }),
            ("abs", vec![6], |t, x, _| Ok(t.abs(x))),
            ("relu", vec![6], |t, x, _| Ok(t.relu(x))),
            ("sqrt", vec![6], |t, x, _| {
                let sq = t.mul(x, x)?;
                let one = t.constant(Tensor::full([6], 0.5));
                let p = t.add(sq, one)?;
                Ok(t.sqrt(p))
            }),
            ("norm_last", vec![2, 3], |t, x, _| t.norm_last(x)),
            ("gather_rows", vec![3, 2], |t, x, _| t.gather_rows(x, &[2, 0, 2, 1])),
            ("const_matmul", vec![2, 3, 2], |t, x, rng| {
                let dense: Vec<f64> = random(&[4, 3], rng).into_data();
                let m = std::rc::Rc::new(crate::tensor::SparseMatrix::from_dense(4, 3, &dense)?);
                t.const_matmul(&m, x)
            }),
            ("batch_norm", vec![4, 3], |t, x, rng| {
                let g = t.param(&random(&[3], rng));
                let b = t.param(&random(&[3], rng));
                let (y, _) = t.batch_norm(x, g, b, 1e-5, None)?;
                let w = t.constant(random(&[4, 3], rng));
                t.mul(y, w)
            }),
        ];
        for (name, shape, build) in cases {
            for trial in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(trial * 31 + 7);
                let x = random(&shape, &mut rng);
                let seed = rng.gen::<u64>();
                let r = gradient_check(
                    |t, x| {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let y = build(t, x, &mut rng)?;
                        let ys = t.shape(y).to_vec();
                        let w = t.constant(random(&ys, &mut rng));
                        let p = t.mul(y, w)?;
                        Ok(t.sum(p))
                    },
                    &x,
                    1e-6,
                )
                .unwrap();
                assert!(r.max_rel_err < 1e-6, "{name} trial {trial}: {r:?} ({})", f64::DTYPE);
            }
        }
    }
}
