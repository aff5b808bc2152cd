use std::path::Path;

use mter::attacks::{run_attack, AttackSpec, Iters};
use mter::checkpoint;
use mter::data::DatasetSplit;
use mter::eval::accuracy;
use mter_nn::loss::row_sq_distances;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model = checkpoint::load(Path::new(&args[1])).unwrap().model;
    let data = DatasetSplit::load_mnist(Path::new("data/mnist")).unwrap();
    let pool = data.test.sample(800, 5).all();
    let n = 256;
    let src: Vec<usize> = (0..n).collect();
    let mut tgt = Vec::new();
    let mut next = n;
    for &i in &src {
        while pool.labels[next] == pool.labels[i] {
            next += 1;
        }
        tgt.push(next);
        next += 1;
    }
    let (bs, bt) = (pool.select(&src), pool.select(&tgt));
    let es = model.forward(&bs.to_input()).unwrap().embedding;
    let et = model.forward(&bt.to_input()).unwrap().embedding;
    for (iters, alpha) in [(Iters::Fixed(10), 8.0), (Iters::Auto, 1.0)] {
        let spec = AttackSpec::iftgsm(76, bt.clone()).with_iters(iters).with_alpha(alpha);
        let adv = run_attack(&model, &bs, &spec).unwrap().adversarial;
        let ea = model.forward(&adv.to_input()).unwrap().embedding;
        let d_s = row_sq_distances(&ea, &es);
        let d_t = row_sq_distances(&ea, &et);
        let sat = d_s.iter().zip(&d_t).filter(|(a, b)| **a + 0.2 <= **b).count();
        let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
        println!("{iters:?} a{alpha}: satisfied {sat}/{n} mean d_src {:.3} d_tgt {:.3}", mean(&d_s), mean(&d_t));
    }
    let test = data.test.sample(500, 7).all();
    println!("clean {:.2}", accuracy(&model, &test).unwrap());
    for eps in [10u8, 25, 50, 76] {
        let adv = run_attack(&model, &test, &AttackSpec::bim(eps)).unwrap().adversarial;
        let f = run_attack(&model, &test, &AttackSpec::fgsm(eps)).unwrap().adversarial;
        println!("eps {eps}: bim {:.2} fgsm {:.2}", accuracy(&model, &adv).unwrap(), accuracy(&model, &f).unwrap());
    }
}
