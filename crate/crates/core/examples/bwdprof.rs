use gatefusion::config::RunConfig;
use gatefusion::model::GateFusionModel;
use gatefusion::synthdata::{derive_seed, generate_episode, EpisodeBatch, EpisodeConfig};
use gatefusion::tape::Tape;

fn main() {
    let cfg = RunConfig::default();
    let model = GateFusionModel::new(&cfg).unwrap();
    let n_ep = cfg.train.batch_frames / cfg.episode.video_frames;
    let batch: Vec<EpisodeBatch> = (0..n_ep)
        .map(|i| {
            let seed = derive_seed(cfg.episode.seed, 0, i as u64);
            generate_episode(&EpisodeConfig { seed, ..cfg.episode.clone() }).unwrap()
        })
        .collect();
    let refs: Vec<&EpisodeBatch> = batch.iter().collect();
    let mut agg: std::collections::HashMap<String, (f64, usize)> = Default::default();
    let reps = 10;
    for _ in 0..reps {
        let mut tape = Tape::new(&model.store);
        let fwd = model.forward_batch(&mut tape, &refs).unwrap();
        let terms = model.loss_terms(&mut tape, &fwd).unwrap();
        let (_, rows) = tape.backward_profiled(terms.total).unwrap();
        for (k, t, n) in rows {
            let e = agg.entry(k).or_insert((0.0, 0));
            e.0 += t;
            e.1 += n;
        }
    }
    let mut rows: Vec<_> = agg.into_iter().collect();
    rows.sort_by(|a, b| b.1 .0.total_cmp(&a.1 .0));
    println!("node count/step: {}", rows.iter().map(|r| r.1 .1).sum::<usize>() / reps);
    for (k, (t, n)) in rows {
        println!("{k:12} {:8.1} ms/step  ({} nodes)", t / reps as f64 * 1e3, n / reps);
    }
}
