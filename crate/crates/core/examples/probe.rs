use sidelink_trk::{chest, scene, waveform, SPEED_OF_LIGHT};
use nalgebra::Vector3;

fn main() {
    let ofdm = waveform::OfdmConfig {
        subcarriers: 288, subcarrier_spacing: 60e3, n_symbols: 12,
        carrier_freq: 5.9e9, tx_power_dbm: 10.0, noise_psd_dbm_hz: -174.0, noise_figure_db: 8.0,
    };
    let array = waveform::ArrayConfig::half_wavelength(4, 2, ofdm.wavelength()).unwrap();
    let geom = scene::SceneGeometry::intersection_default();
    let rsu = scene::RsuState::new(Vector3::new(0.0, 0.0, 10.0), Vector3::zeros());
    let base = chest::SaConfig { restarts: 2, als_max_iters: 80, als_tol: 1e-7, ..chest::SaConfig::default() };
    let cru = scene::CruState::planar(1.6, -70.0, 1.5, 0.0, 14.0);
    let paths = scene::generate_paths(&geom, &rsu, &cru, ofdm.wavelength()).unwrap();
    for p in &paths {
        println!("true: {:8.3}m az={:6.1} el={:6.1} |g|={:.2e}", p.toa*SPEED_OF_LIGHT, p.aoa_az.to_degrees(), p.aoa_el.to_degrees(), p.gain.norm());
    }
    let true_toa = paths[0].toa;
    for (name, cfg) in [
        ("refine3", base),
        ("refine0", chest::SaConfig { refine_passes: 0, ..base }),
    ] {
        let mut sq = 0.0; let mut n = 0;
        for seed in 0..8u64 {
            let t = waveform::synthesize(&paths, &array, &ofdm, 9000 + seed).unwrap();
            let est = chest::estimate(&t, &array, &ofdm, &cfg, seed).unwrap();
            print!("{name} seed {seed}: R={} p={:.1e} |", est.rank_used, est.residual);
            for p in &est.paths { print!(" {:7.2}", p.toa * SPEED_OF_LIGHT); }
            if let Some(p) = est.paths.iter().min_by(|a, b| (a.toa - true_toa).abs().partial_cmp(&(b.toa - true_toa).abs()).unwrap()) {
                let e = SPEED_OF_LIGHT * (p.toa - true_toa);
                println!(" err={e:6.2}");
                sq += e * e; n += 1;
            } else { println!(" none"); }
        }
        println!("{name}: rmse={:.3} over {n}\n", (sq / n as f64).sqrt());
    }
}
