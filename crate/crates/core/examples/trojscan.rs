//! Scratch probe: desk-model trojan regime exploration. Not shipped.

use archsec_core::attacks::{
    optimize_trigger, select_target_neurons, stamp_trigger, trojan_inject, BackdoorConfig,
};
use archsec_core::data::{load, DataSource, DatasetSpec};
use archsec_core::search_space::{reference_darts_genotype, CellTemplate, NetworkTemplate};
use archsec_core::trainer::{train_model, TrainConfig};
use archsec_core::{ModelArch, Network};

fn main() {
    let spec = DatasetSpec {
        source: DataSource::Synthetic {
            num_classes: 10,
            height: 12,
            width: 12,
            channels: 3,
            train_per_class: 150,
            test_per_class: 40,
            noise: 0.45,
            seed: 31,
        },
        train_limit: None,
        test_limit: None,
        subset_seed: 0,
    };
    let data = load(&spec).unwrap();
    let arch = ModelArch::CellNet {
        cell: CellTemplate::default(),
        net: NetworkTemplate {
            n_cells: 2,
            reduction_positions: vec![1],
            stem_width: 8,
            num_classes: 10,
            input_dims: (12, 12, 3),
        },
        genotype: reference_darts_genotype(),
    };
    let net = Network::new(arch, 7).unwrap();
    let cfg = TrainConfig {
        epochs: 25,
        batch_size: 16,
        learning_rate: 0.08,
        seed: 7,
        ..TrainConfig::default()
    };
    let model = train_model(net, &data.train, &cfg).unwrap();
    let acc = data
        .test
        .images
        .iter()
        .zip(&data.test.labels)
        .filter(|(x, &y)| model.network.predict(x).unwrap() == y)
        .count() as f64
        / data.test.len() as f64;
    println!("desk clean acc {acc:.3}");

    let tune = data.train.subsample(256, 0x7707);
    let test = data.test.subsample(256, 0x7708);

    // Feature-space reconnaissance for one config.
    let probe_cfg = BackdoorConfig {
        trigger_h: 4,
        trigger_w: 4,
        transparency: 0.2,
        n_neuron: 3,
        preprocess_iters: 150,
        preprocess_lr: 0.05,
        ..BackdoorConfig::default()
    };
    let (w_all, d) = model.network.classifier_weights();
    let row = &w_all[0..d];
    let selected = select_target_neurons(row, probe_cfg.n_neuron).unwrap();
    let hosts = tune.subsample(32, 0x7716).images;
    let (trig, before, after) =
        optimize_trigger(&model.network, &hosts, &selected, &probe_cfg).unwrap();
    println!("canvas selected-activation {before:.4} -> {after:.4}, selected {selected:?}, d={d}");

    let mut sel_clean = 0.0;
    let mut sel_stamp = 0.0;
    let mut disp = 0.0;
    let mut spread = 0.0;
    let mut prev: Option<Vec<f64>> = None;
    let n_probe = 64.min(test.len());
    for i in 0..n_probe {
        let h_c = model.network.penultimate(&test.images[i]).unwrap();
        let h_s = model
            .network
            .penultimate(&stamp_trigger(&test.images[i], &trig).unwrap())
            .unwrap();
        sel_clean += selected.iter().map(|&j| h_c[j]).sum::<f64>() / n_probe as f64;
        sel_stamp += selected.iter().map(|&j| h_s[j]).sum::<f64>() / n_probe as f64;
        disp += h_c
            .iter()
            .zip(&h_s)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / n_probe as f64;
        if let Some(p) = &prev {
            spread += h_c
                .iter()
                .zip(p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / (n_probe - 1) as f64;
        }
        prev = Some(h_c);
    }
    println!(
        "selected units: clean mean {sel_clean:.4} stamped mean {sel_stamp:.4}; \
         mean |h_s-h_c| {disp:.4} vs clean-clean spread {spread:.4}"
    );

    // Config grid.
    let grid: Vec<(&str, BackdoorConfig)> = vec![
        (
            "A: 4x4 t0.2 n3 it150 lam1.25 ft10@0.02b16",
            BackdoorConfig {
                trigger_h: 4,
                trigger_w: 4,
                transparency: 0.2,
                n_neuron: 3,
                preprocess_iters: 150,
                preprocess_lr: 0.05,
                lambda: 1.25,
                finetune: TrainConfig {
                    epochs: 10,
                    batch_size: 16,
                    learning_rate: 0.02,
                    ..TrainConfig::default()
                },
                ..BackdoorConfig::default()
            },
        ),
        (
            "B: 4x4 t0.1 n6 it200 lam1.0 ft8@0.01b16",
            BackdoorConfig {
                trigger_h: 4,
                trigger_w: 4,
                transparency: 0.1,
                n_neuron: 6,
                preprocess_iters: 200,
                preprocess_lr: 0.05,
                lambda: 1.0,
                finetune: TrainConfig {
                    epochs: 8,
                    batch_size: 16,
                    learning_rate: 0.01,
                    ..TrainConfig::default()
                },
                ..BackdoorConfig::default()
            },
        ),
        (
            "C: 5x5 t0.05 n8 it200 lam0.75 ft12@0.01b16",
            BackdoorConfig {
                trigger_h: 5,
                trigger_w: 5,
                transparency: 0.05,
                n_neuron: 8,
                preprocess_iters: 200,
                preprocess_lr: 0.05,
                lambda: 0.75,
                finetune: TrainConfig {
                    epochs: 12,
                    batch_size: 16,
                    learning_rate: 0.01,
                    ..TrainConfig::default()
                },
                ..BackdoorConfig::default()
            },
        ),
        (
            "D: 4x4 t0.1 n6 it200 lam0.5 ft8@0.005b32",
            BackdoorConfig {
                trigger_h: 4,
                trigger_w: 4,
                transparency: 0.1,
                n_neuron: 6,
                preprocess_iters: 200,
                preprocess_lr: 0.05,
                lambda: 0.5,
                finetune: TrainConfig {
                    epochs: 8,
                    batch_size: 32,
                    learning_rate: 0.005,
                    ..TrainConfig::default()
                },
                ..BackdoorConfig::default()
            },
        ),
    ];
    for (name, cfg) in grid {
        let out = trojan_inject(&model.network, &tune, &test, &cfg).unwrap();
        println!(
            "{name}: asr {:.3} cad {:.3} (clean {:.3} -> {:.3}) act {:.3}->{:.3}",
            out.asr,
            out.cad,
            out.clean_acc_before,
            out.clean_acc_after,
            out.activation_before,
            out.activation_after
        );
    }
}
