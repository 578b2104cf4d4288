use nalgebra::DVector;
use veer::dynamics::{unicycle_dual_mode, Mode, Target, UnicycleConfig};

fn main() {
    let cfg = UnicycleConfig::default();
    let ta = Target::new(DVector::from_vec(vec![0.0, 0.0]), 0.1).unwrap();
    let tb = Target::new(DVector::from_vec(vec![-0.2, 0.4]), 0.1).unwrap();
    let model = unicycle_dual_mode(&cfg, &ta, &tb, 0.0, 0.01).unwrap();
    let map = model.discretize(Mode::Alpha);
    let mut x = DVector::from_vec(cfg.initial_state.to_vec());
    for n in 0..=400 {
        if n % 20 == 0 {
            println!(
                "n={n:4} x=({:+.4},{:+.4}) th={:+.4} dist={:.4}",
                x[0], x[1], x[2], ta.distance(&x)
            );
        }
        x = map.apply(&x);
    }
}
