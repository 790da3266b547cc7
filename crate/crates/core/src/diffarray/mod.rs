//! Minimal reverse-mode differentiation over dense `f64` arrays.

mod array;
mod gradcheck;
mod params;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff_check, GradCheck};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.input(Array::vector(vec![0.0, 0.0]));
        let s = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut t = Tape::new();
        let x = t.input(Array::row(vec![1000.0, 1001.0, 999.0]));
        let s = t.softmax(x, 1).unwrap();
        let v = t.value(s);
        assert!(v.is_finite());
        assert!((v.sum() - 1.0).abs() < 1e-12);
        assert!(v.data()[1] > v.data()[0] && v.data()[0] > v.data()[2]);
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut t = Tape::new();
        let x = t.input(Array::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap());
        let s = t.softmax(x, 0).unwrap();
        let v = t.value(s).clone();
        for j in 0..2 {
            assert!((v.get2(0, j) + v.get2(1, j) - 1.0).abs() < 1e-12);
        }
        assert!(t.softmax(x, 2).is_err());
    }

    #[test]
    fn outer_product_definition() {
        let mut t = Tape::new();
        let a = t.input(Array::vector(vec![1.0, 2.0]));
        let b = t.input(Array::vector(vec![3.0, 4.0]));
        let o = t.outer(a, b);
        assert_eq!(t.value(o).shape(), &[2, 2]);
        assert_eq!(t.value(o).data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(&[3, 3], &mut rng);
        let mut t = Tape::new();
        let i = t.constant(Array::identity(3));
        let mv = t.input(m.clone());
        let p = t.matmul(i, mv).unwrap();
        assert_eq!(t.value(p), &m);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.input(Array::zeros(&[2, 3]));
        let b = t.input(Array::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
        let c = t.input(Array::zeros(&[4]));
        let msg = t.add(a, c).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut store = ParamStore::new();
        let p = store.add("p", Array::vector(vec![0.3, -2.0, 5.0])).unwrap();
        let mut t = Tape::new();
        let v = t.param(&store, p);
        let s = t.sum(v);
        let g = t.backward(s, &store).unwrap();
        assert_eq!(g.param(p).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut store = ParamStore::new();
        let p = store.add("p", Array::vector(vec![1.0, 2.0])).unwrap();
        let mut t = Tape::new();
        let v = t.param(&store, p);
        let sq = t.mul(v, v).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s, &store).unwrap();
        assert_eq!(g.param(p).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut store = ParamStore::new();
        let p = store.add("p", Array::vector(vec![1.0])).unwrap();
        let q = store.add("q", Array::zeros(&[2, 2])).unwrap();
        let mut t = Tape::new();
        let v = t.param(&store, p);
        let s = t.sum(v);
        let g = t.backward(s, &store).unwrap();
        assert_eq!(g.param(q), &Array::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = ParamStore::new();
        let mut t = Tape::new();
        let x = t.input(Array::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x, &store), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn leaf_gradients_are_reported() {
        let store = ParamStore::new();
        let mut t = Tape::new();
        let x = t.input(Array::vector(vec![0.5]));
        let y = t.sin(x);
        let g = t.backward(y, &store).unwrap();
        assert!((g.wrt(x).unwrap().item() - 0.5f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn gradcheck_on_sum_of_squares_is_tight() {
        let mut store = ParamStore::new();
        store.add("p", Array::vector(vec![0.7, -1.3, 2.1])).unwrap();
        let r = finite_diff_check(&store, 1e-6, |t, s| {
            let p = t.param(s, s.id("p").unwrap());
            let sq = t.square(p);
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn gradcheck_on_constant_function_is_zero() {
        let mut store = ParamStore::new();
        store.add("p", Array::vector(vec![0.7, -1.3])).unwrap();
        let r = finite_diff_check(&store, 1e-6, |t, _| Ok(t.constant(Array::scalar(4.0)))).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn gradcheck_reports_non_finite_with_index() {
        let mut store = ParamStore::new();
        store.add("p", Array::vector(vec![1.0, 0.0])).unwrap();
        let err = finite_diff_check(&store, 1e-6, |t, s| {
            let p = t.param(s, s.id("p").unwrap());
            let v = t.value(p).clone();
            // poisoned once the second entry is pushed below zero
            let inv = t.constant(v.map(|x| if x < 0.0 { f64::NAN } else { 1.0 }));
            let m = t.mul(p, inv)?;
            Ok(t.sum(m))
        })
        .unwrap_err();
        assert!(err.to_string().contains("\"p\"") && err.to_string().contains("index 1"), "{err}");
    }

    /// Every primitive in one composite graph, checked against central differences.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.add("a", random(&[3, 4], &mut rng)).unwrap();
        store.add("b", random(&[4, 2], &mut rng)).unwrap();
        store.add("r", random(&[1, 2], &mut rng)).unwrap();
        store.add("c", random(&[3, 3], &mut rng)).unwrap();
        let w = random(&[3, 8], &mut rng);
        let r = finite_diff_check(&store, 1e-6, move |t, s| {
            let a = t.param(s, s.id("a").unwrap());
            let b = t.param(s, s.id("b").unwrap());
            let r = t.param(s, s.id("r").unwrap());
            let c = t.param(s, s.id("c").unwrap());
            let ab = t.matmul(a, b)?; // 3x2
            let ab = t.add_row(ab, r)?;
            let g = t.gelu(ab);
            let th = t.tanh(ab);
            let sn = t.sin(g);
            let cs = t.cos(th);
            let cat = t.concat_cols(&[sn, cs, c])?; // 3x7
            let sm = t.softmax(cat, 1)?;
            let sl = t.slice_cols(sm, 1, 5)?; // 3x4
            let tr = t.transpose(sl)?; // 4x3
            let rs = t.reshape(tr, &[3, 4])?;
            let gath = t.gather_rows(rs, &[2, 0, 2])?;
            let kr = t.row_kron(gath, ab)?; // 3x8
            let nr = t.normalize_rows(kr, 1e-3);
            let wv = t.constant(w.clone());
            let prod = t.mul(nr, wv)?;
            let e = t.exp(prod);
            let sc = t.scale(e, 0.5);
            let sq = t.square(sc);
            let sub = t.sub(sq, e)?;
            let o = t.outer(r, c);
            let os = t.sum(o);
            let m = t.mean(sub);
            let ms = t.square(m);
            let m2 = t.sqrt(ms)?;
            let tot = t.add(m2, os)?;
            Ok(tot)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
