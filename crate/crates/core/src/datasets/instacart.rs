//! Loader for the Instacart market-basket CSV dump: one session per order,
//! items in add-to-cart order.
//!
//! Columns are located by header name, so the full dump (which carries extra
//! columns such as `eval_set` or `aisle_id`) loads unchanged.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use super::{Corpus, Item, ItemId, Partition, Session, UserId, DEFAULT_SESSION_CAP};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrderProductRow {
    pub order_id: u64,
    pub product_id: u64,
    pub add_to_cart_order: u64,
}

struct Table<R: Read> {
    name: String,
    reader: csv::Reader<R>,
    columns: Vec<usize>,
}

impl<R: Read> Table<R> {
    /// Returns `None` for a completely empty input.
    fn open(input: R, name: &str, wanted: &[&str]) -> Result<Option<Self>> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(input);
        let headers = reader.headers().map_err(|e| csv_error(name, &e))?.clone();
        if headers.is_empty() {
            return Ok(None);
        }
        let mut columns = Vec::with_capacity(wanted.len());
        for col in wanted {
            let idx = headers
                .iter()
                .position(|h| h.trim().trim_start_matches('\u{feff}') == *col)
                .ok_or_else(|| Error::Parse {
                    source_name: name.to_string(),
                    line: 1,
                    message: format!("missing column `{col}`"),
                })?;
            columns.push(idx);
        }
        Ok(Some(Table {
            name: name.to_string(),
            reader,
            columns,
        }))
    }

    fn for_each(
        mut self,
        mut f: impl FnMut(&csv::StringRecord, &[usize], u64) -> Result<()>,
    ) -> Result<()> {
        let mut record = csv::StringRecord::new();
        loop {
            match self.reader.read_record(&mut record) {
                Ok(true) => {
                    let line = record.position().map_or(0, |p| p.line());
                    f(&record, &self.columns, line)?;
                }
                Ok(false) => return Ok(()),
                Err(e) => return Err(csv_error(&self.name, &e)),
            }
        }
    }
}

fn csv_error(name: &str, e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        source_name: name.to_string(),
        line,
        message: e.to_string(),
    }
}

fn field_u64(name: &str, record: &csv::StringRecord, col: usize, line: u64) -> Result<u64> {
    let raw = record.get(col).unwrap_or("").trim();
    raw.parse::<u64>().map_err(|_| Error::Parse {
        source_name: name.to_string(),
        line,
        message: format!("expected an unsigned integer, found `{raw}`"),
    })
}

/// `products.csv`: `(product_id, product_name)` rows in file order.
pub fn parse_products<R: Read>(input: R, name: &str) -> Result<Vec<(u64, String)>> {
    let mut out = Vec::new();
    let Some(table) = Table::open(input, name, &["product_id", "product_name"])? else {
        return Ok(out);
    };
    table.for_each(|rec, cols, line| {
        let id = field_u64(name, rec, cols[0], line)?;
        let text = rec.get(cols[1]).unwrap_or("").to_string();
        out.push((id, text));
        Ok(())
    })?;
    Ok(out)
}

/// `orders.csv`: `(order_id, user_id)` rows in file order.
pub fn parse_orders<R: Read>(input: R, name: &str) -> Result<Vec<(u64, u64)>> {
    let mut out = Vec::new();
    let Some(table) = Table::open(input, name, &["order_id", "user_id"])? else {
        return Ok(out);
    };
    table.for_each(|rec, cols, line| {
        out.push((
            field_u64(name, rec, cols[0], line)?,
            field_u64(name, rec, cols[1], line)?,
        ));
        Ok(())
    })?;
    Ok(out)
}

/// Streams `order_products.csv` rows to `sink` along with their line number.
pub fn parse_order_products<R: Read>(
    input: R,
    name: &str,
    mut sink: impl FnMut(OrderProductRow, u64) -> Result<()>,
) -> Result<()> {
    let Some(table) = Table::open(
        input,
        name,
        &["order_id", "product_id", "add_to_cart_order"],
    )?
    else {
        return Ok(());
    };
    table.for_each(|rec, cols, line| {
        let row = OrderProductRow {
            order_id: field_u64(name, rec, cols[0], line)?,
            product_id: field_u64(name, rec, cols[1], line)?,
            add_to_cart_order: field_u64(name, rec, cols[2], line)?,
        };
        sink(row, line)
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn ingest_instacart(orders: &Path, order_products: &Path, products: &Path) -> Result<Corpus> {
    ingest_instacart_from_readers(
        open(orders)?,
        open(order_products)?,
        open(products)?,
        DEFAULT_SESSION_CAP,
    )
}

/// Builds a corpus from the three tables. Users and items are re-indexed
/// densely in ascending order of their source ids; sessions follow the order
/// of `orders`. Orders without products produce no session.
pub fn ingest_instacart_from_readers<A: Read, B: Read, C: Read>(
    orders: A,
    order_products: B,
    products: C,
    session_cap: usize,
) -> Result<Corpus> {
    if session_cap == 0 {
        return Err(Error::invalid("session cap must be positive"));
    }
    let mut product_rows = parse_products(products, "products.csv")?;
    product_rows.sort_by_key(|(id, _)| *id);
    if let Some(w) = product_rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Parse {
            source_name: "products.csv".into(),
            line: 0,
            message: format!("duplicate product id {}", w[0].0),
        });
    }
    let item_index: HashMap<u64, ItemId> = product_rows
        .iter()
        .enumerate()
        .map(|(dense, (id, _))| (*id, dense as ItemId))
        .collect();

    let order_rows = parse_orders(orders, "orders.csv")?;
    let mut order_index: HashMap<u64, usize> = HashMap::with_capacity(order_rows.len());
    for (pos, (order_id, _)) in order_rows.iter().enumerate() {
        if order_index.insert(*order_id, pos).is_some() {
            return Err(Error::Parse {
                source_name: "orders.csv".into(),
                line: pos as u64 + 2,
                message: format!("duplicate order id {order_id}"),
            });
        }
    }
    let mut user_ids: Vec<u64> = order_rows.iter().map(|(_, u)| *u).collect();
    user_ids.sort_unstable();
    user_ids.dedup();
    let user_index: HashMap<u64, UserId> = user_ids
        .iter()
        .enumerate()
        .map(|(dense, id)| (*id, dense as UserId))
        .collect();

    let mut baskets: Vec<Vec<(u64, ItemId)>> = vec![Vec::new(); order_rows.len()];
    parse_order_products(order_products, "order_products.csv", |row, line| {
        let &pos = order_index.get(&row.order_id).ok_or(Error::UnknownId {
            source_name: "order_products.csv".into(),
            line,
            kind: "order",
            id: row.order_id,
        })?;
        let &item = item_index.get(&row.product_id).ok_or(Error::UnknownId {
            source_name: "order_products.csv".into(),
            line,
            kind: "product",
            id: row.product_id,
        })?;
        baskets[pos].push((row.add_to_cart_order, item));
        Ok(())
    })?;

    let mut sessions = Vec::new();
    for ((_, user), mut basket) in order_rows.iter().zip(baskets) {
        if basket.is_empty() {
            continue;
        }
        basket.sort_by_key(|(rank, _)| *rank);
        basket.truncate(session_cap);
        sessions.push(Session::organic(
            user_index[user],
            basket.into_iter().map(|(_, i)| i).collect(),
        ));
    }

    let corpus = Corpus {
        num_users: user_ids.len(),
        items: product_rows
            .iter()
            .enumerate()
            .map(|(dense, (_, text))| Item {
                id: dense as ItemId,
                text: text.clone(),
            })
            .collect(),
        sessions,
        partition: vec![Partition::Clean; user_ids.len()],
        original_item_ids: product_rows.iter().map(|(id, _)| *id).collect(),
        original_user_ids: user_ids,
        session_cap,
    };
    corpus.validate()?;
    Ok(corpus)
}
