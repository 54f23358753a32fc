//! Regret of the AMF learner on random bilinear games.

use calibra::online::amf::{run_amf_matrix_game, BilinearGame};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> calibra::Result<()> {
    for t in [100, 500, 2000] {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let games: Vec<BilinearGame> = (0..t).map(|_| BilinearGame::random(&mut rng, 3, 4, 4, 1.0)).collect();
        let r = run_amf_matrix_game(&games, 1.0)?;
        println!("T = {t:>4}: regret {:>9.3}, bound {:>8.3}, eta {:.4}", r.regret, r.bound, r.eta);
    }
    Ok(())
}
