use fedkws::params::ParamSet;
use fedkws::tape::{backward, Tape, Targets};
use fedkws::tensor::Tensor;

#[test]
fn two_conv_residual_bias_grad_matches_fd() {
    let x_data = vec![1.0, -2.0, 3.0, -4.0];
    let loss_at = |ba: f64, bb: f64| -> f64 {
        let mut params = ParamSet::new();
        let wa_i = params
            .register("wa", Tensor::from_vec(&[1, 1, 1], vec![0.5]).unwrap(), true)
            .unwrap();
        let ba_i = params
            .register("ba", Tensor::from_vec(&[1], vec![ba]).unwrap(), true)
            .unwrap();
        let wb_i = params
            .register("wb", Tensor::from_vec(&[1, 1, 1], vec![-0.3]).unwrap(), true)
            .unwrap();
        let bb_i = params
            .register("bb", Tensor::from_vec(&[1], vec![bb]).unwrap(), true)
            .unwrap();
        let dw_i = params
            .register("dw", Tensor::from_vec(&[2, 1], vec![1.0, -1.0]).unwrap(), true)
            .unwrap();
        let db_i = params
            .register("db", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap(), true)
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(&[1, 1, 4], x_data.clone()).unwrap());
        let wa = tape.param(wa_i, params.value(wa_i).clone());
        let ban = tape.param(ba_i, params.value(ba_i).clone());
        let wb = tape.param(wb_i, params.value(wb_i).clone());
        let bbn = tape.param(bb_i, params.value(bb_i).clone());
        let a = tape.conv1d(x, wa, Some(ban), 1, 0);
        let b = tape.conv1d(x, wb, Some(bbn), 1, 0);
        let s = tape.add(a, b);
        let r = tape.relu(s);
        let p = tape.global_avg_pool(r);
        let dw = tape.param(dw_i, params.value(dw_i).clone());
        let db = tape.param(db_i, params.value(db_i).clone());
        let logits = tape.dense(p, dw, db);
        let loss = tape.cross_entropy(logits, Targets::Hard(vec![0])).unwrap();
        tape.value(loss).scalar_value()
    };

    // Autodiff gradient for ba at (0.1, 0.2).
    let mut params = ParamSet::new();
    let wa_i = params
        .register("wa", Tensor::from_vec(&[1, 1, 1], vec![0.5]).unwrap(), true)
        .unwrap();
    let ba_i = params
        .register("ba", Tensor::from_vec(&[1], vec![0.1]).unwrap(), true)
        .unwrap();
    let wb_i = params
        .register("wb", Tensor::from_vec(&[1, 1, 1], vec![-0.3]).unwrap(), true)
        .unwrap();
    let bb_i = params
        .register("bb", Tensor::from_vec(&[1], vec![0.2]).unwrap(), true)
        .unwrap();
    let dw_i = params
        .register("dw", Tensor::from_vec(&[2, 1], vec![1.0, -1.0]).unwrap(), true)
        .unwrap();
    let db_i = params
        .register("db", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap(), true)
        .unwrap();
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_vec(&[1, 1, 4], x_data.clone()).unwrap());
    let wa = tape.param(wa_i, params.value(wa_i).clone());
    let ban = tape.param(ba_i, params.value(ba_i).clone());
    let wb = tape.param(wb_i, params.value(wb_i).clone());
    let bbn = tape.param(bb_i, params.value(bb_i).clone());
    let a = tape.conv1d(x, wa, Some(ban), 1, 0);
    let b = tape.conv1d(x, wb, Some(bbn), 1, 0);
    let s = tape.add(a, b);
    let r = tape.relu(s);
    let p = tape.global_avg_pool(r);
    let dw = tape.param(dw_i, params.value(dw_i).clone());
    let db = tape.param(db_i, params.value(db_i).clone());
    let logits = tape.dense(p, dw, db);
    let loss = tape.cross_entropy(logits, Targets::Hard(vec![0])).unwrap();
    backward(&tape, loss, &mut params).unwrap();
    let ad = params.entry(ba_i).grad.data()[0];

    let h = 1e-6;
    let fd = (loss_at(0.1 + h, 0.2) - loss_at(0.1 - h, 0.2)) / (2.0 * h);
    eprintln!("minimal: ad={ad} fd={fd}");
    assert!((ad - fd).abs() < 1e-8, "ad {ad} vs fd {fd}");
}
