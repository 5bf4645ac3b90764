use credspline::basis::{BasisSpec, BoundaryScheme};
use credspline::posterior::{fit, NoiseModel, PriorSpec};
use credspline::simulate::*;

fn main() {
    let grid: Vec<Vec<f64>> = (0..2001).map(|i| vec![i as f64 / 2000.0]).collect();
    let xs: Vec<f64> = grid.iter().map(|p| p[0]).collect();
    let f = TrueFunction::PaperSeries { k: 50_000 };
    let f0g = f.eval_many(&xs);

    for k in [17usize, 100] {
        let fk = TrueFunction::PaperSeries { k };
        let fkg = fk.eval_many(&xs);
        let (mut sup, mut arg) = (0.0f64, 0.0f64);
        let mut sup_int = 0.0f64;
        for ((x, a), b) in xs.iter().zip(&f0g).zip(&fkg) {
            let d = (a - b).abs();
            if d > sup { sup = d; arg = *x; }
            if *x > 0.05 && *x < 0.95 && d > sup_int { sup_int = d; }
        }
        println!("tail beyond {k}: sup={sup:.4} at x={arg:.4}; sup on [.05,.95]={sup_int:.4}");
    }

    // where does the noiseless fit error sit?
    let spec = BasisSpec::uniform(1, 4, 13, BoundaryScheme::Clamped).unwrap();
    let prior = PriorSpec::identity_for(&spec, NoiseModel::EmpiricalBayes).unwrap();
    let x = make_design(2000, 1).unwrap();
    let xd: Vec<f64> = x.iter().map(|p| p[0]).collect();
    let y = f.eval_many(&xd);
    let st = fit(&spec, &prior, &x, &y).unwrap();
    let errs: Vec<f64> = xs.iter().zip(&f0g).map(|(xx, t)| (st.mean_deriv(&[0], &[*xx]).unwrap() - t)).collect();
    let (mut sup, mut arg) = (0.0f64, 0.0);
    for (x, e) in xs.iter().zip(&errs) {
        if e.abs() > sup { sup = e.abs(); arg = *x; }
    }
    let sup_int = xs.iter().zip(&errs).filter(|(x, _)| **x > 0.05 && **x < 0.95).map(|(_, e)| e.abs()).fold(0.0f64, f64::max);
    println!("noiseless J=17 fit: sup={sup:.4} at x={arg:.4}; interior sup={sup_int:.4}");

    // shape of f0 on a coarse grid
    print!("f0:");
    for i in 0..=20 {
        let xv = i as f64 / 20.0;
        print!(" {:.3}", f.eval(xv));
    }
    println!();
    // fine-scale roughness near 0.0, 0.3
    for x0 in [0.0f64, 0.3, 0.5] {
        let vals: Vec<f64> = (0..=10).map(|i| f.eval(x0 + i as f64 * 0.002)).collect();
        let rough: f64 = vals.windows(2).map(|w| (w[1]-w[0]).abs()).sum();
        println!("near {x0}: values {:?} total-variation(0.02 window)={rough:.4}", vals.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
    }
}
