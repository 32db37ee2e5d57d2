# coding=utf-8
"""Tests for the audience clients, the snapshot store and the CSV loaders."""

import datetime
import json
import os
import sys
import threading
import unittest

import requests

sys.path.insert(1, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from process_classes.domain_classes import DEFAULT_EPOCH, ArrivalSeries, PenetrationRate, WeekIndex
from process_classes.errors import (InputValidationError, MalformedResponseError, QuotaError, SnapshotConflictError,
                                    TransportError)
from process_classes.ingest_classes import (AudienceQuery, CollectionPlan, HttpAudienceClient, RecordedEstimate,
                                            ReplayAudienceClient, SnapshotStore, fetch_audience, fetch_many,
                                            load_diaspora, load_origin_population, load_penetration, load_unhcr,
                                            parse_estimate, save_penetration, save_unhcr, write_cassette)
from tests.utilities import (COLLECT_PLAN, DIASPORA_CSV, EU_COUNTRIES, ORIGIN_POPULATION_CSV, PENETRATION_CSV,
                             REPLAY_DIR, UNHCR_CSV, FakeResponse, FakeSession, TempDirTestCase, connection_error,
                             estimate_payload, observation, write_store, write_text)

# Falls in w2 of the default epoch
NOW = datetime.datetime(2022, 3, 10, 10, 30, tzinfo=datetime.timezone.utc)


def http_client(outcomes, **kwargs):
    sleeps = []
    session = FakeSession(outcomes)
    client = HttpAudienceClient('https://graph.example.test/v1/act_1', 'token-123', session=session,
                                sleep=sleeps.append, clock=lambda: NOW, **kwargs)
    return client, session, sleeps


class ParseEstimateTest(unittest.TestCase):

    def test_point_estimate(self):
        self.assertEqual(parse_estimate(estimate_payload(4200)), 4200)

    def test_bounds_midpoint(self):
        payload = {'data': [{'estimate_mau_lower_bound': 1000, 'estimate_mau_upper_bound': 1201}]}
        self.assertEqual(parse_estimate(payload), 1100)

    def test_malformed_bodies(self):
        for payload in [{}, {'data': []}, {'data': [{'estimate_mau': -3}]}, {'data': [{'estimate_mau': '12'}]},
                        {'data': [{'estimate_mau': 1.5}]}, ['data']]:
            with self.assertLogs('process_classes.ingest_classes', level='ERROR'):
                with self.assertRaises(MalformedResponseError, msg=repr(payload)):
                    parse_estimate(payload)


class AudienceQueryTest(unittest.TestCase):

    def test_defaults(self):
        query = AudienceQuery('PL')
        self.assertEqual(query.fixture_key(WeekIndex(3)), 'PL-uk-w3')
        self.assertEqual(query.to_dict(), {'country': 'PL', 'language': 'uk', 'min_age': 13})

    def test_minimum_age(self):
        with self.assertRaises(InputValidationError):
            AudienceQuery('PL', min_age=12)
        self.assertEqual(AudienceQuery('PL', min_age=18).min_age, 18)

    def test_language_tag(self):
        for bad in ['', 'UK', 'u', 'uk ua']:
            with self.assertRaises(InputValidationError, msg=bad):
                AudienceQuery('PL', bad)


class CollectionPlanTest(TempDirTestCase, unittest.TestCase):

    def test_bundled_plan(self):
        plan = CollectionPlan.from_json(COLLECT_PLAN)
        self.assertEqual(list(plan.countries), EU_COUNTRIES + ['UA'])
        self.assertEqual(plan.weeks, (0, 1, 2, 3, 4, 5))
        pairs = plan.pairs()
        self.assertEqual(len(pairs), 28 * 6)
        self.assertEqual((pairs[0][0].country, pairs[0][1].index), ('PL', 0))
        self.assertEqual((pairs[7][0].country, pairs[7][1].index), ('DE', 1))

    def test_invalid_plans(self):
        tmp = self.make_temp_dir()
        for name, text in [('empty.json', '{}'), ('broken.json', '{"countries": ['),
                           ('twice.json', '{"countries": ["PL", "PL"]}'),
                           ('weeks.json', '{"countries": ["PL"], "weeks": ["w1"]}')]:
            with self.assertRaises(InputValidationError, msg=name):
                CollectionPlan.from_json(write_text(tmp / name, text))

    def test_missing_plan(self):
        with self.assertRaises(InputValidationError):
            CollectionPlan.from_json(self.make_temp_dir() / 'nope.json')


class HttpAudienceClientTest(TempDirTestCase, unittest.TestCase):

    def test_request_parameters(self):
        client, session, _ = http_client([FakeResponse(200, estimate_payload(500))])
        obs = fetch_audience(client, AudienceQuery('PL'))
        self.assertEqual(obs.mau, 500)
        self.assertEqual(obs.week, WeekIndex(2))
        self.assertEqual(obs.collected_at, NOW.replace(microsecond=0))
        call = session.calls[0]
        self.assertEqual(call['url'], 'https://graph.example.test/v1/act_1/delivery_estimate')
        self.assertEqual(call['params']['access_token'], 'token-123')
        targeting = json.loads(call['params']['targeting_spec'])
        self.assertEqual(targeting['geo_locations'], {'countries': ['PL']})
        self.assertEqual(targeting['age_min'], 13)
        self.assertEqual(targeting['languages'], ['uk'])

    def test_retries_server_errors_with_backoff(self):
        client, session, sleeps = http_client([FakeResponse(503, text='busy'), connection_error(),
                                               FakeResponse(200, estimate_payload(77))])
        self.assertEqual(fetch_audience(client, AudienceQuery('DE')).mau, 77)
        self.assertEqual(len(session.calls), 3)
        self.assertEqual(sleeps, [1.0, 2.0])

    def test_gives_up_after_five_attempts(self):
        client, session, sleeps = http_client([FakeResponse(502, text='bad gateway')])
        with self.assertRaises(TransportError) as caught:
            client.estimate(AudienceQuery('DE'), WeekIndex(2))
        self.assertTrue(caught.exception.retryable)
        self.assertEqual(caught.exception.exit_code, 2)
        self.assertEqual(len(session.calls), 5)
        self.assertEqual(sleeps, [1.0, 2.0, 4.0, 8.0])

    def test_broken_response_stream_is_a_transport_error(self):
        for error in (requests.exceptions.ChunkedEncodingError('connection broken: incomplete read'),
                      requests.exceptions.ContentDecodingError('received response with content-encoding: gzip')):
            client, session, sleeps = http_client([error])
            with self.assertRaises(TransportError) as caught:
                client.estimate(AudienceQuery('DE'), WeekIndex(2))
            self.assertTrue(caught.exception.retryable)
            self.assertIn(type(error).__name__, str(caught.exception))
            self.assertEqual(len(session.calls), 5)
            self.assertEqual(sleeps, [1.0, 2.0, 4.0, 8.0])

    def test_one_session_per_worker_thread(self):
        sessions = []
        lock = threading.Lock()

        def new_session():
            session = FakeSession([FakeResponse(200, estimate_payload(10))])
            with lock:
                sessions.append(session)
            return session

        client = HttpAudienceClient('https://graph.example.test/v1/act_1', 'token-123', session_factory=new_session,
                                    sleep=lambda seconds: None, clock=lambda: NOW)
        pairs = [(AudienceQuery(country), WeekIndex(2)) for country in EU_COUNTRIES]
        observations = fetch_many(client, pairs, max_workers=4)
        self.assertEqual([o.mau for o in observations], [10] * len(EU_COUNTRIES))
        self.assertTrue(1 <= len(sessions) <= 4)
        self.assertEqual(sum(len(s.calls) for s in sessions), len(EU_COUNTRIES))
        for session in sessions:
            self.assertEqual(len({call['thread'] for call in session.calls}), 1)
        self.assertEqual(len({s.calls[0]['thread'] for s in sessions}), len(sessions))

    def test_quota_is_not_retried(self):
        for status in (401, 403, 429):
            client, session, sleeps = http_client([FakeResponse(status, {'error': {'message': 'slow down'}})])
            with self.assertRaises(QuotaError) as caught:
                client.estimate(AudienceQuery('DE'), WeekIndex(2))
            self.assertEqual(caught.exception.status_code, status)
            self.assertEqual(caught.exception.exit_code, 2)
            self.assertEqual((len(session.calls), sleeps), (1, []))

    def test_throttling_error_code(self):
        client, session, _ = http_client([FakeResponse(400, {'error': {'code': 17, 'message': 'limit reached'}})])
        with self.assertRaises(QuotaError):
            client.estimate(AudienceQuery('DE'), WeekIndex(2))
        self.assertEqual(len(session.calls), 1)

    def test_other_error_payload_is_malformed(self):
        client, _, _ = http_client([FakeResponse(400, {'error': {'code': 100, 'message': 'bad targeting'}})])
        with self.assertLogs('process_classes.ingest_classes', level='ERROR') as logs:
            with self.assertRaises(MalformedResponseError):
                client.estimate(AudienceQuery('DE'), WeekIndex(2))
        self.assertIn('bad targeting', logs.output[0])

    def test_non_json_body(self):
        client, _, _ = http_client([FakeResponse(200, None, text='<html>maintenance</html>')])
        with self.assertLogs('process_classes.ingest_classes', level='ERROR'):
            with self.assertRaises(MalformedResponseError):
                client.estimate(AudienceQuery('DE'), WeekIndex(2))

    def test_only_current_week(self):
        client, session, _ = http_client([FakeResponse(200, estimate_payload(1))])
        with self.assertRaises(InputValidationError):
            client.estimate(AudienceQuery('DE'), WeekIndex(0))
        self.assertEqual(session.calls, [])

    def test_missing_credentials(self):
        with self.assertRaises(InputValidationError):
            HttpAudienceClient('', 'token')
        with self.assertRaises(InputValidationError):
            HttpAudienceClient('https://graph.example.test', None)

    def test_recorded_responses_replay_identically(self):
        tmp = self.make_temp_dir()
        client, _, _ = http_client([FakeResponse(200, estimate_payload(2000))], record_dir=tmp)
        live = fetch_audience(client, AudienceQuery('CZ'))
        self.assertTrue((tmp / 'CZ-uk-w2.json').is_file())
        replayed = fetch_audience(ReplayAudienceClient(tmp), AudienceQuery('CZ'), WeekIndex(2))
        self.assertEqual(replayed, live)


class ReplayAudienceClientTest(TempDirTestCase, unittest.TestCase):

    def test_bundled_fixture(self):
        obs = fetch_audience(ReplayAudienceClient(REPLAY_DIR), AudienceQuery('PL'), WeekIndex(2))
        self.assertEqual(obs.mau, 235400)
        self.assertEqual(obs.collected_at, datetime.datetime(2022, 3, 10, 9, tzinfo=datetime.timezone.utc))

    def test_replay_is_deterministic(self):
        client = ReplayAudienceClient(REPLAY_DIR)
        query = AudienceQuery('HU')
        self.assertEqual(fetch_audience(client, query, WeekIndex(4)), fetch_audience(client, query, WeekIndex(4)))

    def test_missing_fixture(self):
        with self.assertRaisesRegex(InputValidationError, 'PL-uk-w9'):
            ReplayAudienceClient(REPLAY_DIR).estimate(AudienceQuery('PL'), WeekIndex(9))

    def test_missing_directory(self):
        with self.assertRaises(InputValidationError):
            ReplayAudienceClient(self.make_temp_dir() / 'absent')

    def test_replay_has_no_current_week(self):
        with self.assertRaises(InputValidationError):
            fetch_audience(ReplayAudienceClient(REPLAY_DIR), AudienceQuery('PL'))

    def test_fixture_for_another_query(self):
        tmp = self.make_temp_dir()
        path = write_cassette(tmp, AudienceQuery('DE'), WeekIndex(1),
                              RecordedEstimate(estimate_payload(5), datetime.datetime(2022, 3, 3, 9)))
        path.rename(tmp / 'PL-uk-w1.json')
        with self.assertRaises(InputValidationError):
            ReplayAudienceClient(tmp).estimate(AudienceQuery('PL'), WeekIndex(1))

    def test_collection_outside_week_is_only_a_warning(self):
        tmp = self.make_temp_dir()
        write_cassette(tmp, AudienceQuery('PL'), WeekIndex(3),
                       RecordedEstimate(estimate_payload(5), datetime.datetime(2022, 3, 10, 9)))
        with self.assertLogs('process_classes.ingest_classes', level='WARNING'):
            recorded = ReplayAudienceClient(tmp).estimate(AudienceQuery('PL'), WeekIndex(3))
        self.assertEqual(parse_estimate(recorded.payload), 5)

    def test_fetch_many_keeps_input_order(self):
        plan = CollectionPlan.from_json(COLLECT_PLAN)
        observations = fetch_many(ReplayAudienceClient(REPLAY_DIR), plan.pairs(), max_workers=8)
        self.assertEqual([(o.country, o.week.index) for o in observations],
                         [(q.country, w.index) for q, w in plan.pairs()])
        self.assertEqual(observations[0].mau, 137700)


class SnapshotStoreTest(TempDirTestCase, unittest.TestCase):

    def test_created_empty(self):
        path = self.make_temp_dir() / 'nested' / 'snapshots.jsonl'
        store = SnapshotStore(path)
        self.assertTrue(path.is_file())
        self.assertEqual(len(store), 0)

    def test_append_is_idempotent(self):
        path = self.make_temp_dir() / 'snapshots.jsonl'
        store = SnapshotStore(path)
        self.assertTrue(store.append(observation('PL', 0, 100)))
        self.assertFalse(store.append(observation('PL', 0, 100)))
        with open(path, encoding='utf-8') as f:
            self.assertEqual(len(f.readlines()), 1)

    def test_conflict_leaves_file_untouched(self):
        path = self.make_temp_dir() / 'snapshots.jsonl'
        store = SnapshotStore(path)
        store.append(observation('PL', 0, 100))
        before = path.read_bytes()
        with self.assertRaises(SnapshotConflictError) as caught:
            store.append(observation('PL', 0, 101))
        self.assertEqual((caught.exception.stored_mau, caught.exception.new_mau), (100, 101))
        self.assertEqual(caught.exception.exit_code, 1)
        self.assertEqual(path.read_bytes(), before)

    def test_batch_check_catches_conflicts_within_the_batch(self):
        store = SnapshotStore(self.make_temp_dir() / 'snapshots.jsonl')
        with self.assertRaises(SnapshotConflictError):
            store.check([observation('PL', 1, 10), observation('PL', 1, 11)])
        store.check([observation('PL', 1, 10), observation('PL', 1, 10)])
        self.assertEqual(len(store), 0)

    def test_languages_are_separate_keys(self):
        store = SnapshotStore(self.make_temp_dir() / 'snapshots.jsonl')
        store.append(observation('PL', 0, 100, 'uk'))
        self.assertTrue(store.append(observation('PL', 0, 300, 'ru')))
        self.assertEqual([o.mau for o in store.scan(language='ru')], [300])

    def test_reload_and_scan_order(self):
        path = write_store(self.make_temp_dir() / 'snapshots.jsonl',
                           [('PL', 1, 110), ('DE', 0, 50), ('PL', 0, 100), ('DE', 1, 55)])
        store = SnapshotStore(path)
        self.assertEqual([(o.country, o.week.index) for o in store.scan()],
                         [('DE', 0), ('DE', 1), ('PL', 0), ('PL', 1)])
        self.assertEqual([o.mau for o in store.scan('PL', weeks=[WeekIndex(1)])], [110])
        self.assertEqual([o.country for o in store.scan(['DE'], weeks=[0])], ['DE'])
        series = store.series()
        self.assertEqual(series['PL'][1], 110.0)
        self.assertEqual(store.epoch_date, DEFAULT_EPOCH)

    def test_corrupt_lines_are_reported(self):
        path = write_store(self.make_temp_dir() / 'snapshots.jsonl', [('PL', 0, 100)])
        with open(path, 'a', encoding='utf-8') as f:
            f.write('{not json\n')
            f.write(json.dumps({'country': 'PL', 'week': 0, 'mau': 120, 'collected_at': '2022-02-24T09:00:00Z'}) + '\n')
        with self.assertRaises(InputValidationError) as caught:
            SnapshotStore(path)
        self.assertEqual([line for line, _ in caught.exception.errors], [2, 3])

    def test_epoch_mismatch(self):
        store = SnapshotStore(self.make_temp_dir() / 'snapshots.jsonl')
        store.append(observation('PL', 0, 100))
        other = observation('PL', 0, 100)
        moved = other.to_record()
        moved['epoch_date'] = '2023-01-05'
        with self.assertRaises(InputValidationError):
            store.append(type(other).from_record(moved))

    def test_concurrent_appends(self):
        path = self.make_temp_dir() / 'snapshots.jsonl'
        store = SnapshotStore(path)
        countries = EU_COUNTRIES[:8]

        def worker(country):
            for week in range(6):
                store.append(observation(country, week, 1000 + week))
                store.append(observation(country, week, 1000 + week))

        threads = [threading.Thread(target=worker, args=(c,)) for c in countries]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        self.assertEqual(len(store), 48)
        self.assertEqual(len(SnapshotStore(path)), 48)
        with open(path, encoding='utf-8') as f:
            self.assertEqual(len(f.readlines()), 48)


class CsvLoaderTest(TempDirTestCase, unittest.TestCase):

    def test_bundled_diaspora(self):
        stocks = load_diaspora(DIASPORA_CSV)
        self.assertEqual(sorted(stocks), sorted(EU_COUNTRIES))
        self.assertEqual(stocks['PL'].stock, 651000)
        self.assertEqual(stocks['PL'].reference_year, 2021)

    def test_bundled_penetration_lacks_luxembourg(self):
        rates = load_penetration(PENETRATION_CSV)
        self.assertEqual(len(rates), 26)
        self.assertNotIn('LU', rates)
        self.assertEqual(rates['PL'].rate, 0.47)

    def test_bundled_origin_population(self):
        self.assertEqual(load_origin_population(ORIGIN_POPULATION_CSV)['UA'].population_13plus, 35_910_000)

    def test_bundled_unhcr(self):
        arrivals = load_unhcr(UNHCR_CSV)
        self.assertEqual(sorted(arrivals), ['HU', 'PL'])
        self.assertEqual(arrivals['PL'].last_date, datetime.date(2022, 3, 31))
        self.assertEqual(arrivals['PL'].value_on('2022-03-31'), 2375532)
        self.assertEqual(arrivals['HU'].value_on(arrivals['HU'].first_date), 39968)

    def test_every_bad_row_is_reported(self):
        path = write_text(self.make_temp_dir() / 'diaspora.csv',
                          'country,stock,reference_year\n'
                          'PL,651000,2021\n'
                          'DE,"135,000",2021\n'
                          'cz,1000,2021\n'
                          'PL,1,2021\n'
                          'SK,-5,2021\n')
        with self.assertRaises(InputValidationError) as caught:
            load_diaspora(path)
        self.assertEqual([line for line, _ in caught.exception.errors], [3, 4, 5, 6])
        self.assertIn('first seen on line 2', str(caught.exception))

    def test_header_must_match(self):
        path = write_text(self.make_temp_dir() / 'penetration.csv', 'country,penetration\nPL,0.5\n')
        with self.assertRaisesRegex(InputValidationError, 'header must be country,rate'):
            load_penetration(path)

    def test_rate_range(self):
        path = write_text(self.make_temp_dir() / 'penetration.csv', 'country,rate\nPL,0\nDE,1.2\nCZ,abc\nSK,1\n')
        with self.assertRaises(InputValidationError) as caught:
            load_penetration(path)
        self.assertEqual([line for line, _ in caught.exception.errors], [2, 3, 4])

    def test_empty_and_missing_files(self):
        tmp = self.make_temp_dir()
        with self.assertRaises(InputValidationError):
            load_diaspora(write_text(tmp / 'empty.csv', ''))
        with self.assertRaises(InputValidationError):
            load_diaspora(tmp / 'absent.csv')

    def test_penetration_round_trip(self):
        path = self.make_temp_dir() / 'penetration.csv'
        rates = {'PL': PenetrationRate('PL', 0.1 + 0.2), 'DE': PenetrationRate('DE', 1 / 3)}
        save_penetration(rates, path)
        loaded = load_penetration(path)
        self.assertEqual({c: r.rate for c, r in loaded.items()}, {'PL': 0.1 + 0.2, 'DE': 1 / 3})

    def test_unhcr_rows_in_any_order(self):
        path = write_text(self.make_temp_dir() / 'unhcr.csv',
                          'date,country,cumulative_arrivals\n'
                          '2022-03-02,PL,30\n'
                          '2022-03-01,PL,10\n'
                          '2022-03-01,HU,4\n')
        arrivals = load_unhcr(path)
        self.assertEqual(arrivals['PL'].value_on('2022-03-02'), 30)
        self.assertEqual(arrivals['HU'].last_date, datetime.date(2022, 3, 1))

    def test_unhcr_drop_names_the_date(self):
        path = write_text(self.make_temp_dir() / 'unhcr.csv',
                          'date,country,cumulative_arrivals\n'
                          '2022-03-01,PL,10\n'
                          '2022-03-02,PL,9\n')
        with self.assertRaisesRegex(InputValidationError, 'line 3: PL cumulative arrivals drop on 2022-03-02'):
            load_unhcr(path)

    def test_unhcr_duplicate_date(self):
        path = write_text(self.make_temp_dir() / 'unhcr.csv',
                          'date,country,cumulative_arrivals\n'
                          '2022-03-01,PL,10\n'
                          '2022-03-01,PL,10\n')
        with self.assertRaisesRegex(InputValidationError, 'duplicate PL 2022-03-01'):
            load_unhcr(path)

    def test_unhcr_writer_is_readable(self):
        path = self.make_temp_dir() / 'unhcr.csv'
        save_unhcr({'PL': ArrivalSeries('PL', {'2022-02-24': 3, '2022-02-25': 8})}, path)
        self.assertEqual(path.read_text(encoding='utf-8'),
                         'date,country,cumulative_arrivals\n2022-02-24,PL,3\n2022-02-25,PL,8\n')
        self.assertEqual(load_unhcr(path)['PL'].value_on('2022-02-25'), 8)


if __name__ == '__main__':
    unittest.main()
