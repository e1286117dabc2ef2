//! AUC, ACC, RMSE, DOA and Inconsistency on tiny hand-made inputs.

use icdm::dataio::{QMatrix, RatingMatrix, ResponseLog};
use icdm::diffcore::Mat;
use icdm::metrics::{acc, auc, doa, inconsistency, rmse};

fn main() -> icdm::Result<()> {
    let preds = [0.9, 0.7, 0.4, 0.4, 0.2];
    let labels = [1.0, 0.0, 1.0, 0.0, 0.0];
    println!("AUC {:.4}", auc(&preds, &labels)?);
    println!("ACC {:.4}", acc(&preds, &labels)?);
    println!("RMSE {:.4}", rmse(&preds, &labels)?);

    // Student 0 answers both exercises right, student 2 both wrong.
    let q = QMatrix::from_rows(2, vec![vec![0], vec![0, 1]])?;
    let logs: Vec<ResponseLog> = [(0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 0), (2, 0, 0), (2, 1, 0)]
        .iter()
        .map(|&(s, e, r)| ResponseLog::new(s, e, r))
        .collect();
    let agreeing = Mat::from_rows(&[vec![0.9, 0.8], vec![0.6, 0.3], vec![0.1, 0.2]]);
    let reversed = Mat::from_rows(&[vec![0.1, 0.2], vec![0.6, 0.3], vec![0.9, 0.8]]);
    println!("DOA agreeing {:.4}", doa(&agreeing, &logs, &q, &[0, 1])?);
    println!("DOA reversed {:.4}", doa(&reversed, &logs, &q, &[0, 1])?);

    // Students 0 and 1 share their logs; a consistent model gives them equal rows.
    let dup: Vec<ResponseLog> = [(0, 0, 1), (0, 1, 0), (1, 0, 1), (1, 1, 0), (2, 1, 1)]
        .iter()
        .map(|&(s, e, r)| ResponseLog::new(s, e, r))
        .collect();
    let r = RatingMatrix::from_logs(3, 2, &dup);
    let consistent = Mat::from_rows(&[vec![0.7, 0.2], vec![0.7, 0.2], vec![0.4, 0.9]]);
    let drifting = Mat::from_rows(&[vec![0.7, 0.2], vec![0.3, 0.6], vec![0.4, 0.9]]);
    println!("Inconsistency consistent {:.4}", inconsistency(&consistent, &r)?);
    println!("Inconsistency drifting {:.4}", inconsistency(&drifting, &r)?);
    Ok(())
}
