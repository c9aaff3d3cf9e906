use sseg::data::{synth_dataset, ClassPalette};
use sseg::segmodel::ModelConfig;
use sseg::train::{TrainConfig, Trainer};

#[test]
fn long_run_on_sixteen_images_cuts_loss_below_a_fifth() {
    let (pairs, _) = synth_dataset(11, 16, 16, &ClassPalette::default()).unwrap();
    let mut c = TrainConfig::tiny();
    c.model = ModelConfig {
        n_queries: 8,
        embed_dim: 16,
        decoder_layers: 1,
        text_layers: 1,
        context_length: 8,
        vocab_size: 32,
        backbone_channels: vec![8, 16],
        proj_dim: 16,
        heads: 2,
        ..ModelConfig::tiny()
    };
    c.image_size = 16;
    c.batch_size = 8;
    c.epochs = 300;
    c.pseudo_k = 4;
    c.base_lr = 1e-3;
    let mut t = Trainer::new(c, &pairs).unwrap();
    let per_epoch = t.steps_per_epoch() as usize;
    let mut totals = Vec::new();
    while t.state.step < t.total_steps() {
        totals.push(t.step().unwrap().loss.total);
    }
    let initial = totals[0];
    // Mean over the last ten epochs smooths out per-batch noise.
    let tail = &totals[totals.len() - 10 * per_epoch..];
    let late = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(late < 0.2 * initial, "initial {initial}, late {late}");
}
