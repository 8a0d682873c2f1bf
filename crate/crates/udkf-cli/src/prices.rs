//! Price series ingestion: a two-column `date,close` CSV turned into
//! continuously compounded percentage returns.

use std::fs;
use std::path::Path;

use udkf::Error;

#[derive(Debug, Clone)]
pub struct PriceSeries {
    pub dates: Vec<String>,
    pub closes: Vec<f64>,
}

impl PriceSeries {
    /// Parses a CSV with columns `date,close` (a header row is detected and
    /// skipped). Prices must be strictly positive and non-constant.
    pub fn from_csv(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::DegenerateData(format!("cannot read {}: {e}", path.display())))?;
        let mut dates = Vec::new();
        let mut closes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, ',');
            let date = parts.next().unwrap_or("").trim();
            let close = parts
                .next()
                .ok_or_else(|| {
                    Error::DegenerateData(format!("line {}: expected date,close", lineno + 1))
                })?
                .trim();
            match close.parse::<f64>() {
                Ok(v) => {
                    if !(v.is_finite() && v > 0.0) {
                        return Err(Error::DegenerateData(format!(
                            "line {}: price must be positive, got {close}",
                            lineno + 1
                        )));
                    }
                    dates.push(date.to_string());
                    closes.push(v);
                }
                Err(_) if lineno == 0 => continue, // header row
                Err(_) => {
                    return Err(Error::DegenerateData(format!(
                        "line {}: cannot parse price '{close}'",
                        lineno + 1
                    )))
                }
            }
        }
        if closes.len() < 4 {
            return Err(Error::DegenerateData(
                "need at least 4 prices to compute returns".into(),
            ));
        }
        if closes.windows(2).all(|w| w[0] == w[1]) {
            return Err(Error::DegenerateData("price series is constant".into()));
        }
        Ok(PriceSeries { dates, closes })
    }

    /// `100 * (ln c_k - ln c_{k-1})`, one return per price after the first.
    pub fn returns(&self) -> Vec<f64> {
        self.closes
            .windows(2)
            .map(|w| 100.0 * (w[1].ln() - w[0].ln()))
            .collect()
    }

    /// Dates aligned with [`returns`]: the date of the later price.
    pub fn return_dates(&self) -> Vec<String> {
        self.dates[1..].to_vec()
    }
}
