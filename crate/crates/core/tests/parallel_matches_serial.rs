// Runs in its own process since the serial switch is global.
use ampose_core::data::synth_dataset;
use ampose_core::model::{build_model, ModelConfig};
use ampose_core::parallel::set_serial;
use ampose_core::skeleton::Skeleton;
use ampose_core::training::{loss_and_gradients, predict_dataset};

#[test]
fn parallel_and_serial_are_bit_identical() {
    let skel = Skeleton::builtin("h36m17").unwrap();
    let data = synth_dataset(4, 40, &skel).unwrap();
    let cfg = ModelConfig {
        channels: 64,
        depth: 2,
        ..ModelConfig::default()
    };
    let model = build_model(&cfg, 2).unwrap();
    let batch: Vec<_> = data.samples.iter().collect();

    let run = || {
        (
            predict_dataset(&model, &data).unwrap(),
            loss_and_gradients(&model, &batch, 8, false, None).unwrap(),
        )
    };
    set_serial(false);
    let par = run();
    set_serial(true);
    let ser = run();
    set_serial(false);
    assert_eq!(par.0, ser.0);
    assert_eq!(par.1 .0.to_bits(), ser.1 .0.to_bits());
    assert_eq!(par.1 .1, ser.1 .1);
}
