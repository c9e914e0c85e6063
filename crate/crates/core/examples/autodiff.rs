//! Reverse-mode gradients on the tape, checked against a central difference
//! in f64, then Adam recovering a 3³ kernel from its own outputs in f32.

use anyhow::Result;
use eso_rcnn::nn::{Adam, AdamConfig, Graph, Tensor};

fn loss_f64(w: &[f64], x: &Tensor<f64>, target: &Tensor<f64>) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone());
    let wv = g.param(Tensor::new(vec![1, 1, 3, 3, 3], w.to_vec())?);
    let y = g.conv3d(xv, wv, None, 1)?;
    let y = g.sigmoid(y);
    let l = g.rmse(y, target)?;
    let grads = g.backward(l);
    Ok((g.value(l).item(), grads.get_or_zeros(wv, w.len())))
}

fn main() -> Result<()> {
    let shape = vec![1, 6, 6, 6];
    let x: Vec<f64> = (0..216).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    let x = Tensor::new(shape.clone(), x)?;
    // targets produced by a hidden "teacher" kernel
    let teacher: Vec<f64> = (0..27).map(|i| ((i * 7 % 5) as f64 - 2.0) / 4.0).collect();
    let target = {
        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone());
        let wv = g.input(Tensor::new(vec![1, 1, 3, 3, 3], teacher.clone())?);
        let y = g.conv3d(xv, wv, None, 1)?;
        let y = g.sigmoid(y);
        g.value(y).clone()
    };

    // analytic vs central difference on one weight
    let w0: Vec<f64> = (0..27).map(|i| (i as f64 - 13.0) / 40.0).collect();
    let (_, grad) = loss_f64(&w0, &x, &target)?;
    let h = 1e-6;
    let (mut wp, mut wm) = (w0.clone(), w0.clone());
    wp[13] += h;
    wm[13] -= h;
    let numeric = (loss_f64(&wp, &x, &target)?.0 - loss_f64(&wm, &x, &target)?.0) / (2.0 * h);
    println!("d loss / d w[13]: tape {:.8}, central difference {numeric:.8}", grad[13]);

    // f32 training loop
    let x32 = x.cast::<f32>();
    let t32 = target.cast::<f32>();
    let mut w: Vec<f32> = w0.iter().map(|&v| v as f32).collect();
    let mut adam = Adam::new(AdamConfig { lr: 1e-2, ..Default::default() }, &[w.len()]);
    for step in 0..=400 {
        let mut g = Graph::<f32>::new();
        let xv = g.input(x32.clone());
        let wv = g.param(Tensor::new(vec![1, 1, 3, 3, 3], w.clone())?);
        let y = g.conv3d(xv, wv, None, 1)?;
        let y = g.sigmoid(y);
        let l = g.rmse(y, &t32)?;
        if step % 100 == 0 {
            println!("step {step:>3}: rmse {:.4}", g.value(l).item());
        }
        let grad = g.backward(l).get_or_zeros(wv, w.len());
        adam.step(&mut [w.as_mut_slice()], &[grad.as_slice()]);
    }
    let err = w.iter().zip(&teacher).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
    println!("max |w - teacher| = {err:.4}");
    Ok(())
}
