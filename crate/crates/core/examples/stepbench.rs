use gatefusion::config::RunConfig;
use gatefusion::model::GateFusionModel;
use gatefusion::optim::{adamw_step, AdamConfig, AdamState};
use gatefusion::synthdata::{derive_seed, generate_episode, EpisodeBatch, EpisodeConfig};
use gatefusion::tape::Tape;
use std::time::Instant;

fn main() {
    let cfg = RunConfig::default();
    let mut model = GateFusionModel::new(&cfg).unwrap();
    let mut state = AdamState::new(&model.store);
    let adam = AdamConfig::default();
    let n_ep = cfg.train.batch_frames / cfg.episode.video_frames;
    let mut counter = 0u64;
    let steps = 30;
    let t0 = Instant::now();
    let mut fwd_time = 0.0;
    let mut bwd_time = 0.0;
    for step in 0..steps {
        let batch: Vec<EpisodeBatch> = (0..n_ep)
            .map(|_| {
                let seed = derive_seed(cfg.episode.seed, 0, { counter += 1; counter });
                generate_episode(&EpisodeConfig { seed, ..cfg.episode.clone() }).unwrap()
            })
            .collect();
        let refs: Vec<&EpisodeBatch> = batch.iter().collect();
        let tf = Instant::now();
        let mut tape = Tape::new(&model.store);
        let fwdp = model.forward_batch(&mut tape, &refs).unwrap();
        let terms = model.loss_terms(&mut tape, &fwdp).unwrap();
        fwd_time += tf.elapsed().as_secs_f64();
        let tb = Instant::now();
        let grads = tape.backward(terms.total).unwrap();
        let bound = tape.bound_params();
        drop(tape);
        for (id, var) in bound {
            if let Some(g) = grads.get(var) {
                model.store.accumulate_grad(id, g);
            }
        }
        bwd_time += tb.elapsed().as_secs_f64();
        adamw_step(&mut model.store, &mut state, 5e-5, 1e-4, &adam).unwrap();
        model.store.zero_grads();
        if step == 0 {
            println!("nodes per step tape: ~{}", 0);
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{} steps in {:.2}s -> {:.0} ms/step (fwd {:.0} ms, bwd {:.0} ms); 2000 steps ~ {:.1} min",
        steps, dt, dt / steps as f64 * 1e3,
        fwd_time / steps as f64 * 1e3,
        bwd_time / steps as f64 * 1e3,
        dt / steps as f64 * 2000.0 / 60.0
    );
}
