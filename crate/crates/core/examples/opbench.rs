// Times each phase of a training step separately by rebuilding partial passes.
use gatefusion::config::RunConfig;
use gatefusion::model::GateFusionModel;
use gatefusion::synthdata::{derive_seed, generate_episode, EpisodeBatch, EpisodeConfig};
use gatefusion::tape::Tape;
use std::time::Instant;

fn batch(cfg: &RunConfig, step: u64) -> Vec<EpisodeBatch> {
    let n_ep = cfg.train.batch_frames / cfg.episode.video_frames;
    (0..n_ep)
        .map(|i| {
            let seed = derive_seed(cfg.episode.seed, 0, step * n_ep as u64 + i as u64);
            generate_episode(&EpisodeConfig { seed, ..cfg.episode.clone() }).unwrap()
        })
        .collect()
}

fn main() {
    let cfg = RunConfig::default();
    let model = GateFusionModel::new(&cfg).unwrap();
    let reps = 20;

    // Data generation cost.
    let t0 = Instant::now();
    for s in 0..reps {
        let b = batch(&cfg, s as u64);
        std::hint::black_box(&b);
    }
    println!("datagen: {:.1} ms/step", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let b = batch(&cfg, 0);
    let refs: Vec<&EpisodeBatch> = b.iter().collect();

    // Forward only.
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::inference(&model.store);
        let fwd = model.forward_batch(&mut tape, &refs).unwrap();
        std::hint::black_box(tape.value(fwd.bundle.p_av_live));
    }
    println!("forward (inference): {:.1} ms/step", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // Forward with grad bookkeeping + loss.
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new(&model.store);
        let fwd = model.forward_batch(&mut tape, &refs).unwrap();
        let terms = model.loss_terms(&mut tape, &fwd).unwrap();
        std::hint::black_box(tape.scalar(terms.total));
    }
    println!("forward (train): {:.1} ms/step", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // Full step without optimizer.
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new(&model.store);
        let fwd = model.forward_batch(&mut tape, &refs).unwrap();
        let terms = model.loss_terms(&mut tape, &fwd).unwrap();
        let grads = tape.backward(terms.total).unwrap();
        std::hint::black_box(&grads);
    }
    println!("forward+backward: {:.1} ms/step", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
