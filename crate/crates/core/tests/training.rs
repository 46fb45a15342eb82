use mcbeit::config::TrainConfig;
use mcbeit::data::{generate_toy_dataset, Image};
use mcbeit::train::{fit_tokenizer, schedule, train_step, TrainState};

#[test]
fn desk_loss_drops_within_200_steps() {
    let cfg = TrainConfig::desk();
    let data = generate_toy_dataset(&cfg.dataset_spec()).unwrap();
    let (codebook, _) = fit_tokenizer(&cfg, &data.train).unwrap();
    let sched = schedule(&cfg, data.train.len());
    let mut state = TrainState::new(&cfg).unwrap();
    let mut losses = Vec::new();
    for step in 0..200 {
        let start = (step * cfg.batch_size) % data.train.len();
        let images: Vec<&Image> = data.train[start..start + cfg.batch_size].iter().collect();
        losses.push(
            train_step(&cfg, &codebook, &mut state, &images, &sched)
                .unwrap()
                .loss,
        );
    }
    // last ten steps, to keep single-batch noise out of the comparison
    let end = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(end < 0.7 * losses[0], "initial {} final {end}", losses[0]);
}
